//! Artifact-directory stages shared by the command line and the end-to-end
//! tests. Each stage reads its prerequisites from `root`, writes its outputs
//! under its own subdirectory and stamps the resolved configuration there.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::diffusion::uniform_steps;
use crate::eval::{edit_video, evaluate_run, Editor, MetricsReport, RunMeta};
use crate::fdd::{records_csv, train as fdd_train, Ablation, FddRecord, FddState, TeacherPool};
use crate::models::{edit_longer_video, Component, Model, ParamStore, Variant};
use crate::numerics::Tensor;
use crate::rng::Stream;
use crate::teachers;
use crate::train::LossLog;
use crate::vocab::Token;
use crate::worldgen::dataset::load_points;
use crate::worldgen::{build_datasets, Datasets};

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Layout {
        Layout { root: root.to_path_buf() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("backbone")
    }

    pub fn edit(&self) -> PathBuf {
        self.root.join("edit")
    }

    pub fn video(&self) -> PathBuf {
        self.root.join("video")
    }

    pub fn pool(&self) -> PathBuf {
        self.root.join("pool")
    }

    pub fn fdd(&self, preset: Ablation) -> PathBuf {
        self.root.join("fdd").join(preset.name())
    }

    pub fn eval(&self, label: &str) -> PathBuf {
        self.root.join("eval").join(label)
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn stream(cfg: &RunConfig, label: &str) -> Stream {
    Stream::new(cfg.seed).split(label)
}

pub fn gen_data(cfg: &RunConfig, root: &Path) -> Result<Datasets> {
    let l = Layout::new(root);
    let d = build_datasets(&cfg.world)?;
    d.save(&l.data())?;
    cfg.stamp(&l.data())?;
    log::info!(
        "datasets: {} frames, {} edit pairs, {} videos, {} fdd points, {} eval items",
        d.backbone.len(),
        d.edit.len(),
        d.video.len(),
        d.fdd.len(),
        d.eval.len()
    );
    Ok(d)
}

fn load_data(l: &Layout) -> Result<Datasets> {
    Datasets::load(&require(l.data())?)
}

fn load_component(model: &mut Model, dir: PathBuf) -> Result<()> {
    model.params.load_into(&require(dir)?.join("params"))?;
    Ok(())
}

fn finish_teacher(cfg: &RunConfig, dir: &Path, model: &Model, c: Component, log_: &LossLog) -> Result<()> {
    model.params.save(&dir.join("params"), &[c])?;
    log_.write(&dir.join("loss.csv"))?;
    cfg.stamp(dir)
}

pub fn pretrain_backbone(cfg: &RunConfig, root: &Path) -> Result<LossLog> {
    let l = Layout::new(root);
    let d = load_data(&l)?;
    let mut model = Model::new(cfg.model.clone(), &stream(cfg, "model"))?;
    let sched = cfg.schedule()?;
    let log_ = teachers::pretrain_backbone(&mut model, &d.backbone, &sched, &cfg.train_config(cfg.backbone_iters), &stream(cfg, "backbone"))?;
    finish_teacher(cfg, &l.backbone(), &model, Component::Theta, &log_)?;
    Ok(log_)
}

fn load_backbone(cfg: &RunConfig, l: &Layout) -> Result<Model> {
    let mut model = Model {
        cfg: cfg.model.clone(),
        params: ParamStore::new(),
    };
    load_component(&mut model, l.backbone())?;
    Ok(model)
}

pub fn train_edit(cfg: &RunConfig, root: &Path) -> Result<LossLog> {
    let l = Layout::new(root);
    let d = load_data(&l)?;
    let mut model = load_backbone(cfg, &l)?;
    model.attach_edit(&stream(cfg, "model"))?;
    let sched = cfg.schedule()?;
    let log_ = teachers::train_edit_adapter(&mut model, &d.edit, &sched, &cfg.train_config(cfg.edit_iters), &stream(cfg, "edit"))?;
    finish_teacher(cfg, &l.edit(), &model, Component::Edit, &log_)?;
    Ok(log_)
}

pub fn train_video(cfg: &RunConfig, root: &Path) -> Result<LossLog> {
    let l = Layout::new(root);
    let d = load_data(&l)?;
    let mut model = load_backbone(cfg, &l)?;
    model.attach_video(&stream(cfg, "model"))?;
    let sched = cfg.schedule()?;
    let log_ = teachers::train_video_adapter(&mut model, &d.video, &sched, &cfg.train_config(cfg.video_iters), &stream(cfg, "video"))?;
    finish_teacher(cfg, &l.video(), &model, Component::Video, &log_)?;
    Ok(log_)
}

/// The backbone with both trained adapters attached.
pub fn load_teacher(cfg: &RunConfig, root: &Path) -> Result<Model> {
    let l = Layout::new(root);
    let mut model = load_backbone(cfg, &l)?;
    load_component(&mut model, l.edit())?;
    load_component(&mut model, l.video())?;
    Ok(model)
}

/// Teacher samples for the FDD points, reused when the pool on disk was
/// built from the same teachers, data and teacher step count.
pub fn teacher_pool(cfg: &RunConfig, root: &Path, teacher: &Model) -> Result<TeacherPool> {
    let l = Layout::new(root);
    let points = load_points(&require(l.data())?.join("fdd"))?;
    let dir = l.pool();
    let key = cfg.teacher_hash();
    if std::fs::read_to_string(dir.join("teacher.hash")).ok().as_deref().map(str::trim) == Some(key.as_str()) {
        if let Ok(p) = TeacherPool::load(&dir) {
            if p.len() == points.len() {
                return Ok(p);
            }
        }
    }
    let start = Instant::now();
    let pool = TeacherPool::build(teacher, &points, cfg.fdd.teacher_steps, &cfg.schedule()?, &stream(cfg, "pool"))?;
    pool.save(&dir)?;
    cfg.stamp(&dir)?;
    std::fs::write(dir.join("teacher.hash"), format!("{key}\n"))?;
    log::info!("teacher pool: {} points in {:.1}s", pool.len(), start.elapsed().as_secs_f64());
    Ok(pool)
}

pub struct FddOutcome {
    pub records: Vec<FddRecord>,
    pub seconds: f64,
    pub state: FddState,
}

/// Align the student under `preset`. Reads only the unsupervised FDD points.
pub fn fdd_align(cfg: &RunConfig, root: &Path, preset: Ablation) -> Result<FddOutcome> {
    let l = Layout::new(root);
    let teacher = load_teacher(cfg, root)?;
    let points = load_points(&require(l.data())?.join("fdd"))?;
    let fcfg = preset.apply(&cfg.fdd);
    let dir = l.fdd(preset);
    let sched = cfg.schedule()?;
    let mut state = FddState::new(teacher, fcfg, &stream(cfg, "fdd"))?;
    let start = Instant::now();
    let records = if state.cfg.total_iters() == 0 {
        Vec::new()
    } else {
        let pool = teacher_pool(cfg, root, &state.teacher)?;
        let every = cfg.checkpoint_every;
        let mut seen = Vec::new();
        fdd_train(&mut state, &points, &pool, &sched, &stream(cfg, "fdd-train"), |s, r| {
            seen.push(r.clone());
            if r.iter % 50 == 0 {
                log::info!("fdd {preset} iter {} phase {} sds_e {:?} g_e {:?} d_e {:?}", r.iter, r.phase.name(), r.sds_edit, r.g_edit, r.d_edit);
            }
            if every > 0 && (r.iter + 1) % every == 0 {
                let ck = dir.join(format!("ckpt_{:05}", r.iter + 1));
                s.save(&ck)?;
                std::fs::write(ck.join("fdd.csv"), records_csv(&seen))?;
            }
            Ok(())
        })?
    };
    let seconds = start.elapsed().as_secs_f64();
    state.save(&dir)?;
    std::fs::write(dir.join("fdd.csv"), records_csv(&records))?;
    std::fs::write(dir.join("timing.txt"), format!("iterations = {}\nseconds = {seconds:.3}\n", records.len()))?;
    cfg.stamp(&dir)?;
    Ok(FddOutcome { records, seconds, state })
}

/// The model behind `label`: `oracle`, `identity`, `psi`, `eta`, or an
/// aligned preset name (run as the student phi). Also returns the number of
/// alignment iterations behind it.
pub fn run_model(cfg: &RunConfig, root: &Path, label: &str) -> Result<(Model, Editor, usize)> {
    let l = Layout::new(root);
    let teacher = load_teacher(cfg, root)?;
    Ok(match label {
        "oracle" => (teacher, Editor::Oracle, 0),
        "identity" => (teacher, Editor::Identity, 0),
        "psi" => (teacher, Editor::Model(Variant::Psi), 0),
        "eta" => (teacher, Editor::Model(Variant::Eta), 0),
        preset => {
            let a = Ablation::parse(preset).map_err(|_| invalid("evaluate", format!("unknown run label `{preset}`")))?;
            let dir = require(l.fdd(a))?;
            let mut m = teacher;
            m.params.load_into(&require(dir.join("student"))?)?;
            let timing = std::fs::read_to_string(dir.join("timing.txt")).unwrap_or_default();
            let iters = timing
                .lines()
                .find_map(|s| s.strip_prefix("iterations = "))
                .and_then(|v| v.trim().parse().ok())
                .unwrap_or(0);
            (m, Editor::Model(Variant::Phi), iters)
        }
    })
}

/// Evaluate `label` (see [`run_model`]) on the held-out eval set.
pub fn evaluate(cfg: &RunConfig, root: &Path, label: &str) -> Result<MetricsReport> {
    let l = Layout::new(root);
    let d = load_data(&l)?;
    let (model, editor, iteration) = run_model(cfg, root, label)?;
    let sched = cfg.schedule()?;
    let out = l.eval(label);
    let mut ecfg = cfg.eval.clone();
    ecfg.seed = cfg.seed;
    let meta = RunMeta {
        label: label.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        iteration,
    };
    let features = load_backbone(cfg, &l)?;
    let report = evaluate_run(&model, editor, &features.params, &d.eval, &sched, &ecfg, meta, Some(&out.join("ppm")))?;
    report.write(&out)?;
    cfg.stamp(&out)?;
    Ok(report)
}

/// Edit an arbitrary clip `[F, 3, H, W]` with the model behind `label`.
/// Clips longer than the training window are edited window by window.
pub fn sample(cfg: &RunConfig, root: &Path, label: &str, video: &Tensor, c_out: &[Token], c_instruct: &[Token]) -> Result<Tensor> {
    let (model, editor, _) = run_model(cfg, root, label)?;
    let variant = match editor {
        Editor::Model(v) => v,
        _ => return Err(invalid("sample", format!("`{label}` needs an oracle target; pick psi, eta or a preset"))),
    };
    let sched = cfg.schedule()?;
    let mut ecfg = cfg.eval.clone();
    ecfg.seed = cfg.seed;
    let window = cfg.world.frames;
    if variant != Variant::Psi && video.shape()[0] > window {
        let steps = uniform_steps(ecfg.steps, sched.steps())?;
        let mut rng = Stream::new(cfg.seed).split("sample");
        return edit_longer_video(&model, variant, video, window, c_out, c_instruct, &steps, &sched, &mut rng);
    }
    edit_video(&model, variant, video, c_out, c_instruct, "sample", &sched, &ecfg)
}
