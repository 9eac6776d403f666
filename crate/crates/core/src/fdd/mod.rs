//! Factorized diffusion distillation: a LoRA student, initialized as the
//! plug-and-play composition of both adapters, is aligned with score
//! distillation from the edit and video teachers plus two conditioned
//! hinge discriminators.

pub mod disc;
pub mod losses;
pub mod pool;

use std::fmt::Write as _;
use std::path::Path;

pub use losses::{d_hinge, g_hinge, sds_loss, sds_surrogate, GLossForm, SdsDraw, SdsTerm, Teacher, Weighting};
pub use pool::TeacherPool;

use crate::diffusion::{kbin_timesteps, NoiseSchedule, TimestepDraw};
use crate::error::{invalid, Error, Result};
use crate::models::compose::sample_with;
use crate::models::{Binder, Component, Conds, Init, Model, ParamStore, Variant};
use crate::numerics::{backward, Adam, AdamConfig, Tape, Tensor, Var};
use crate::rng::Stream;
use crate::train::apply;
use crate::vocab::Token;
use crate::worldgen::DataPoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdsDraws {
    /// Each teacher gets its own `(t, eps)`.
    Independent,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Student = both trained adapters on the backbone.
    Pretrained,
    /// Fresh adapters (edit copy of the encoder, identity temporal layers);
    /// the whole model is fine-tuned.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FddConfig {
    /// Student sampling steps.
    pub k: usize,
    pub alpha: f32,
    pub beta: f32,
    pub lambda: f32,
    pub warmup_iters: usize,
    pub adversarial_iters: usize,
    pub sds_draws: SdsDraws,
    pub g_loss: GLossForm,
    pub kbin: bool,
    pub init: InitMode,
    pub lr: f32,
    pub disc_lr: f32,
    /// Clips per iteration.
    pub batch: usize,
    /// DDIM steps of the teacher samples.
    pub teacher_steps: usize,
    /// Distillation timesteps are drawn from `[t_min, t_max] * T`.
    pub t_min: f64,
    pub t_max: f64,
    pub weighting: Weighting,
    /// Node budget of one student unroll.
    pub tape_limit: usize,
}

impl Default for FddConfig {
    fn default() -> Self {
        FddConfig {
            k: 3,
            alpha: 0.5,
            beta: 0.5,
            lambda: 2.5,
            warmup_iters: 1000,
            adversarial_iters: 500,
            sds_draws: SdsDraws::Independent,
            g_loss: GLossForm::Paper,
            kbin: true,
            init: InitMode::Pretrained,
            lr: 1e-4,
            disc_lr: 1e-4,
            batch: 4,
            teacher_steps: 16,
            t_min: 0.02,
            t_max: 0.98,
            weighting: Weighting::Unit,
            tape_limit: 2_000_000,
        }
    }
}

impl FddConfig {
    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.adversarial_iters
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.k == 0 || self.k > total_steps {
            return Err(invalid("fdd", format!("k = {} must lie in 1..={total_steps}", self.k)));
        }
        if self.batch == 0 || self.teacher_steps == 0 {
            return Err(invalid("fdd", "batch and teacher steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.t_min) || !(self.t_min..=1.0).contains(&self.t_max) {
            return Err(invalid("fdd", "need 0 <= t_min <= t_max <= 1"));
        }
        Ok(())
    }

    fn t_range(&self, total: usize) -> (usize, usize) {
        let lo = ((self.t_min * total as f64).round() as usize).clamp(1, total);
        let hi = ((self.t_max * total as f64).round() as usize).clamp(lo, total);
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    RandomInit,
    NoAlignment,
    NoSds,
    NoDisc,
    NoKbin,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::RandomInit,
        Ablation::NoAlignment,
        Ablation::NoSds,
        Ablation::NoDisc,
        Ablation::NoKbin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::RandomInit => "random_init",
            Ablation::NoAlignment => "no_alignment",
            Ablation::NoSds => "no_sds",
            Ablation::NoDisc => "no_disc",
            Ablation::NoKbin => "no_kbin",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid("ablation", format!("unknown preset `{s}`")))
    }

    /// The configuration this preset trains with. `no_sds` drops the SDS
    /// terms and with them the SDS-only warmup; `no_disc` drops the
    /// adversarial phase.
    pub fn apply(self, base: &FddConfig) -> FddConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::RandomInit => c.init = InitMode::Random,
            Ablation::NoAlignment => {
                c.warmup_iters = 0;
                c.adversarial_iters = 0;
            }
            Ablation::NoSds => {
                c.lambda = 0.0;
                c.warmup_iters = 0;
            }
            Ablation::NoDisc => c.adversarial_iters = 0,
            Ablation::NoKbin => c.kbin = false,
        }
        c
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Adversarial,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "sds",
            Phase::Adversarial => "adv",
        }
    }
}

/// Loss values of one iteration; terms that were not computed are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct FddRecord {
    pub iter: usize,
    pub sds_edit: Option<f64>,
    pub sds_video: Option<f64>,
    pub g_edit: Option<f64>,
    pub g_video: Option<f64>,
    pub d_edit: Option<f64>,
    pub d_video: Option<f64>,
    pub phase: Phase,
}

pub fn records_csv(records: &[FddRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    let mut s = String::from("iter,L_SDS-Edit,L_SDS-Video,L_G-Edit,L_G-Video,L_D-Edit,L_D-Video,phase\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iter,
            cell(r.sds_edit),
            cell(r.sds_video),
            cell(r.g_edit),
            cell(r.g_video),
            cell(r.d_edit),
            cell(r.d_video),
            r.phase.name()
        );
    }
    s
}

/// One batch of clips in row layout.
pub struct Batch {
    pub frames: usize,
    pub c_out: Vec<Vec<Token>>,
    pub c_instruct: Vec<Vec<Token>>,
    /// Input rows `[B F, C, H, W]`.
    pub c_vid: Var,
    /// Edit-teacher first frames `[B, C, H, W]`, when first-frame conditioning is on.
    pub first: Option<Var>,
    pub real_edit: Var,
    pub real_video: Var,
}

impl Batch {
    pub fn new(points: &[&DataPoint], pool: &TeacherPool, index: &[usize], first_frame: bool) -> Result<Batch> {
        if points.is_empty() || points.len() != index.len() {
            return Err(invalid("fdd batch", "one pool index per point required"));
        }
        let frames = points[0].c_vid.shape()[0];
        let cat = |f: &dyn Fn(usize) -> Result<Tensor>| -> Result<Var> {
            Ok(Var::constant(Tensor::cat0(&(0..points.len()).map(f).collect::<Result<Vec<_>>>()?)?))
        };
        Ok(Batch {
            frames,
            c_out: points.iter().map(|p| p.c_out.clone()).collect(),
            c_instruct: points.iter().map(|p| p.c_instruct.clone()).collect(),
            c_vid: cat(&|i| Ok(points[i].c_vid.clone()))?,
            first: if first_frame { Some(cat(&|i| pool.edit[index[i]].slice0(0, 1))?) } else { None },
            real_edit: cat(&|i| Ok(pool.edit[index[i]].clone()))?,
            real_video: cat(&|i| Ok(pool.video[index[i]].clone()))?,
        })
    }

    pub fn conds(&self) -> Conds<'_> {
        Conds {
            frames: self.frames,
            c_out: &self.c_out,
            c_instruct: Some(&self.c_instruct),
            c_vid: Some(&self.c_vid),
            first: self.first.as_ref(),
        }
    }

    fn instr_rows(&self) -> Vec<&[Token]> {
        self.c_instruct
            .iter()
            .flat_map(|c| std::iter::repeat(c.as_slice()).take(self.frames))
            .collect()
    }

    fn captions(&self) -> Vec<&[Token]> {
        self.c_out.iter().map(|c| c.as_slice()).collect()
    }
}

/// Student `k`-step sample from `noise`, on the binder's tape.
pub fn student_generate(b: &Binder, model_cfg: &crate::models::ModelConfig, conds: &Conds, noise: Var, draw: &TimestepDraw, sched: &NoiseSchedule) -> Result<Var> {
    sample_with(b, model_cfg, Variant::Phi, conds, noise, &draw.steps, sched)
}

/// Everything the trainer owns: the frozen teachers, the student and the
/// discriminator heads with their optimizers.
pub struct FddState {
    pub cfg: FddConfig,
    pub teacher: Model,
    pub student: Model,
    pub disc: ParamStore,
    adam_g: Adam,
    adam_d: Adam,
    pub iteration: usize,
}

impl FddState {
    /// `teacher` must carry the trained backbone and both adapters.
    pub fn new(teacher: Model, cfg: FddConfig, rng: &Stream) -> Result<FddState> {
        for c in [Component::Theta, Component::Edit, Component::Video] {
            if !teacher.params.has_component(c) {
                return Err(invalid("fdd", format!("teacher model lacks {}", c.tag())));
            }
        }
        if teacher.params.has_component(Component::Align) {
            return Err(invalid("fdd", "teacher model must not carry LoRA weights"));
        }
        let mut student = teacher.clone();
        if cfg.init == InitMode::Random {
            student.params.remove_component(Component::Edit);
            student.params.remove_component(Component::Video);
            let r = rng.split("random_init");
            student.attach_edit(&r)?;
            student.attach_video(&r)?;
        }
        student.attach_lora(rng)?;
        let mut disc = ParamStore::new();
        disc::init_disc(
            &teacher.cfg,
            &mut Init {
                store: &mut disc,
                rng: rng.split("disc"),
            },
        )?;
        Ok(FddState {
            adam_g: Adam::new(AdamConfig::with_lr(cfg.lr)),
            adam_d: Adam::new(AdamConfig::with_lr(cfg.disc_lr)),
            cfg,
            teacher,
            student,
            disc,
            iteration: 0,
        })
    }

    /// Components the generator step may update.
    pub fn trainable(&self) -> Vec<Component> {
        match self.cfg.init {
            InitMode::Pretrained => vec![Component::Align],
            InitMode::Random => vec![Component::Theta, Component::Edit, Component::Video, Component::Align],
        }
    }

    pub fn phase(&self) -> Phase {
        if self.iteration < self.cfg.warmup_iters {
            Phase::Warmup
        } else {
            Phase::Adversarial
        }
    }

    fn draw(&self, r: &mut Stream, sched: &NoiseSchedule) -> Result<TimestepDraw> {
        if self.cfg.kbin {
            kbin_timesteps(self.cfg.k, sched.steps(), r)
        } else {
            TimestepDraw::fixed(self.cfg.k, sched.steps())
        }
    }

    fn sds_draw(&self, clips: usize, shape: &[usize], r: &mut Stream, sched: &NoiseSchedule) -> SdsDraw {
        let (lo, hi) = self.cfg.t_range(sched.steps());
        SdsDraw {
            ts: (0..clips).map(|_| r.range(lo, hi)).collect(),
            eps: r.normal_tensor(shape),
        }
    }

    /// One iteration on `batch`: during warmup a distillation-only student
    /// update; afterwards one discriminator update, then one student update
    /// against the updated discriminators.
    pub fn step(&mut self, batch: &Batch, sched: &NoiseSchedule, rng: &Stream) -> Result<FddRecord> {
        let it = self.iteration;
        let (grads, rec) = self.student_gradients(batch, sched, rng)?;
        let trainable = self.trainable();
        apply(&mut self.student.params, &mut self.adam_g, &grads, &trainable).map_err(|e| match e {
            Error::NonFiniteGradient(n) => Error::Divergence {
                iteration: it,
                what: format!("non-finite gradient for `{n}`"),
            },
            e => e,
        })?;
        self.iteration += 1;
        Ok(rec)
    }

    /// Gradients of the student objective at the current iteration. In the
    /// adversarial phase this first updates the discriminators.
    pub fn student_gradients(&mut self, batch: &Batch, sched: &NoiseSchedule, rng: &Stream) -> Result<(Vec<(String, Tensor)>, FddRecord)> {
        let it = self.iteration;
        let phase = self.phase();
        let mut r = rng.split("iter").split_index(it as u64);
        let draw = self.draw(&mut r, sched)?;
        let shape = batch.c_vid.shape().to_vec();
        let noise = Var::constant(r.normal_tensor(&shape));
        let clips = batch.c_out.len();
        let draw_e = self.sds_draw(clips, &shape, &mut r, sched);
        let draw_v = match self.cfg.sds_draws {
            SdsDraws::Independent => self.sds_draw(clips, &shape, &mut r, sched),
            SdsDraws::Shared => draw_e.clone(),
        };
        let (alpha, beta, lambda) = (self.cfg.alpha, self.cfg.beta, self.cfg.lambda);
        let mcfg = self.teacher.cfg.clone();
        let trainable = self.trainable();
        let diverged = |what: String| Error::Divergence { iteration: it, what };
        let mut rec = FddRecord {
            iter: it,
            sds_edit: None,
            sds_video: None,
            g_edit: None,
            g_video: None,
            d_edit: None,
            d_video: None,
            phase,
        };

        let grads = {
            let tape = Tape::with_limit(self.cfg.tape_limit);
            let sb = Binder::new(&self.student.params, Some(&tape), &trainable).with_lora(mcfg.lora());
            let conds = batch.conds();
            let x0 = student_generate(&sb, &mcfg, &conds, noise, &draw, sched)?;
            if tape.overflowed() {
                return Err(Error::TapeOverflow { k: self.cfg.k, nodes: tape.len() });
            }
            let tb = Binder::frozen(&self.teacher.params);
            let mut terms: Vec<Var> = Vec::new();
            if lambda != 0.0 {
                let e = sds_loss(&tb, &mcfg, Teacher::Edit, &x0, &conds, &draw_e, sched, self.cfg.weighting)?;
                let v = sds_loss(&tb, &mcfg, Teacher::Video, &x0, &conds, &draw_v, sched, self.cfg.weighting)?;
                rec.sds_edit = Some(e.loss.value().item() as f64);
                rec.sds_video = Some(v.loss.value().item() as f64);
                terms.push(e.loss.scale(alpha * lambda));
                terms.push(v.loss.scale(beta * lambda));
            }
            if phase == Phase::Adversarial {
                let (de, dv) = disc_step(&mut self.disc, &mut self.adam_d, &self.teacher, &self.cfg, batch, x0.value(), it)?;
                rec.d_edit = Some(de);
                rec.d_video = Some(dv);
                let db = Binder::frozen(&self.disc);
                let fe = disc::d_edit(&db, &tb, &mcfg, &x0, &batch.c_vid, &batch.instr_rows())?;
                let fv = disc::d_video(&db, &tb, &mcfg, &x0, batch.frames, &batch.captions())?;
                let ge = g_hinge(&fe, self.cfg.g_loss);
                let gv = g_hinge(&fv, self.cfg.g_loss);
                rec.g_edit = Some(ge.value().item() as f64);
                rec.g_video = Some(gv.value().item() as f64);
                terms.push(ge.scale(alpha));
                terms.push(gv.scale(beta));
            }
            let Some(mut loss) = terms.pop() else {
                return Err(invalid("fdd", "the student objective has no terms (lambda = 0 during warmup)"));
            };
            for t in terms {
                loss = loss.add(&t)?;
            }
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(diverged(format!("student loss is {value}")));
            }
            sb.grads(&backward(&loss)?)
        };
        Ok((grads, rec))
    }

    /// Save the student (LoRA, plus the fine-tuned model under random init)
    /// and the discriminator heads.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let comps = match self.cfg.init {
            InitMode::Pretrained => vec![Component::Align],
            InitMode::Random => vec![Component::Theta, Component::Edit, Component::Video, Component::Align],
        };
        self.student.params.save(&dir.join("student"), &comps)?;
        self.disc.save(&dir.join("disc"), &[Component::DiscEdit, Component::DiscVideo])
    }
}

fn disc_step(disc: &mut ParamStore, adam: &mut Adam, teacher: &Model, cfg: &FddConfig, batch: &Batch, fake: &Tensor, it: usize) -> Result<(f64, f64)> {
    let comps = [Component::DiscEdit, Component::DiscVideo];
    let mcfg = &teacher.cfg;
    let (ld_e, ld_v, grads) = {
        let tape = Tape::new();
        let db = Binder::new(disc, Some(&tape), &comps);
        let feat = Binder::frozen(&teacher.params);
        let fake = Var::constant(fake.clone());
        let instr = batch.instr_rows();
        let caps = batch.captions();
        let re = disc::d_edit(&db, &feat, mcfg, &batch.real_edit, &batch.c_vid, &instr)?;
        let fe = disc::d_edit(&db, &feat, mcfg, &fake, &batch.c_vid, &instr)?;
        let rv = disc::d_video(&db, &feat, mcfg, &batch.real_video, batch.frames, &caps)?;
        let fv = disc::d_video(&db, &feat, mcfg, &fake, batch.frames, &caps)?;
        let le = d_hinge(&re, &fe)?;
        let lv = d_hinge(&rv, &fv)?;
        let loss = le.scale(cfg.alpha).add(&lv.scale(cfg.beta))?;
        if !loss.value().item().is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                what: "discriminator loss is not finite".into(),
            });
        }
        (le.value().item() as f64, lv.value().item() as f64, db.grads(&backward(&loss)?))
    };
    apply(disc, adam, &grads, &comps).map_err(|e| match e {
        Error::NonFiniteGradient(n) => Error::Divergence {
            iteration: it,
            what: format!("non-finite gradient for `{n}`"),
        },
        e => e,
    })?;
    Ok((ld_e, ld_v))
}

/// Run every remaining iteration, drawing `cfg.batch` points per step.
/// `on_record` sees each record as it is produced.
pub fn train(
    state: &mut FddState,
    points: &[DataPoint],
    pool: &TeacherPool,
    sched: &NoiseSchedule,
    rng: &Stream,
    mut on_record: impl FnMut(&FddState, &FddRecord) -> Result<()>,
) -> Result<Vec<FddRecord>> {
    state.cfg.validate(sched.steps())?;
    if points.is_empty() || pool.len() != points.len() {
        return Err(invalid("fdd", "the teacher pool must cover every training point"));
    }
    let mut out = Vec::new();
    while state.iteration < state.cfg.total_iters() {
        let mut r = rng.split("batch").split_index(state.iteration as u64);
        let idx: Vec<usize> = (0..state.cfg.batch).map(|_| r.range(0, points.len() - 1)).collect();
        let chosen: Vec<&DataPoint> = idx.iter().map(|&i| &points[i]).collect();
        let batch = Batch::new(&chosen, pool, &idx, state.teacher.cfg.first_frame)?;
        let rec = state.step(&batch, sched, rng)?;
        on_record(state, &rec)?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::models::ModelConfig;
    use crate::worldgen::{build_datasets, DatasetPlan};

    struct Fixture {
        teacher: Model,
        points: Vec<DataPoint>,
        pool: TeacherPool,
        sched: NoiseSchedule,
    }

    fn fixture() -> Fixture {
        let cfg = ModelConfig {
            c1: 8,
            c2: 16,
            emb: 16,
            groups: 4,
            instr_dim: 4,
            disc_dim: 8,
            ..Default::default()
        };
        let rng = Stream::new(21);
        let mut teacher = Model::new(cfg, &rng).unwrap();
        teacher.attach_edit(&rng).unwrap();
        teacher.attach_video(&rng).unwrap();
        let names: Vec<String> = teacher.params.names(Component::Edit).into_iter().chain(teacher.params.names(Component::Video)).collect();
        let mut r = Stream::new(5);
        for n in names {
            let t = teacher.params.get_mut(&n).unwrap();
            *t = t.add(&r.normal_tensor(t.shape()).scale(0.05)).unwrap();
        }
        let mut plan = DatasetPlan::uniform(3, 8);
        plan.frames = 2;
        let points = build_datasets(&plan).unwrap().fdd.clone();
        let sched = NoiseSchedule::new(16, ScheduleKind::Cosine, true).unwrap();
        let pool = TeacherPool::build(&teacher, &points, 2, &sched, &Stream::new(3)).unwrap();
        Fixture {
            teacher,
            points,
            pool,
            sched,
        }
    }

    fn quick(warmup: usize, adversarial: usize) -> FddConfig {
        FddConfig {
            warmup_iters: warmup,
            adversarial_iters: adversarial,
            batch: 2,
            lr: 1e-3,
            disc_lr: 1e-3,
            ..Default::default()
        }
    }

    fn batch(fx: &Fixture, first_frame: bool) -> Batch {
        let pts: Vec<&DataPoint> = fx.points.iter().take(2).collect();
        Batch::new(&pts, &fx.pool, &[0, 1], first_frame).unwrap()
    }

    #[test]
    fn discriminators_wait_for_the_adversarial_phase() {
        let fx = fixture();
        let mut st = FddState::new(fx.teacher.clone(), quick(2, 1), &Stream::new(1)).unwrap();
        let frozen: Vec<String> = [Component::Theta, Component::Edit, Component::Video].iter().map(|&c| st.student.params.checksum(c)).collect();
        let de = st.disc.checksum(Component::DiscEdit);
        let dv = st.disc.checksum(Component::DiscVideo);
        let align = st.student.params.checksum(Component::Align);
        let rng = Stream::new(2);
        let mut recs = Vec::new();
        train(&mut st, &fx.points, &fx.pool, &fx.sched, &rng, |s, r| {
            if r.phase == Phase::Warmup {
                assert_eq!(s.disc.checksum(Component::DiscEdit), de);
                assert_eq!(s.disc.checksum(Component::DiscVideo), dv);
            }
            recs.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(recs.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![Phase::Warmup, Phase::Warmup, Phase::Adversarial]);
        assert!(recs[0].d_edit.is_none() && recs[2].d_edit.is_some() && recs[2].g_video.is_some());
        assert_ne!(st.disc.checksum(Component::DiscEdit), de);
        assert_ne!(st.student.params.checksum(Component::Align), align);
        let after: Vec<String> = [Component::Theta, Component::Edit, Component::Video].iter().map(|&c| st.student.params.checksum(c)).collect();
        assert_eq!(after, frozen);
        for c in [Component::Theta, Component::Edit, Component::Video] {
            assert_eq!(st.teacher.params.checksum(c), fx.teacher.params.checksum(c));
        }
    }

    #[test]
    fn student_starts_as_plug_and_play_composition() {
        let fx = fixture();
        let st = FddState::new(fx.teacher.clone(), quick(1, 0), &Stream::new(1)).unwrap();
        let b = batch(&fx, true);
        let draw = TimestepDraw::fixed(3, fx.sched.steps()).unwrap();
        let noise = Var::constant(Stream::new(9).normal_tensor(b.c_vid.shape()));
        let phi = student_generate(&Binder::frozen(&st.student.params).with_lora(st.student.cfg.lora()), &st.student.cfg, &b.conds(), noise.clone(), &draw, &fx.sched).unwrap();
        let eta = sample_with(&Binder::frozen(&fx.teacher.params), &fx.teacher.cfg, Variant::Eta, &b.conds(), noise, &draw.steps, &fx.sched).unwrap();
        assert!(phi.value().bit_eq(eta.value()));
    }

    #[test]
    fn sds_weight_scales_gradients_linearly() {
        let fx = fixture();
        let grads = |lambda: f32| {
            let cfg = FddConfig { lambda, ..quick(1, 0) };
            let mut st = FddState::new(fx.teacher.clone(), cfg, &Stream::new(1)).unwrap();
            st.student_gradients(&batch(&fx, true), &fx.sched, &Stream::new(4)).unwrap().0
        };
        let (g1, g2) = (grads(1.0), grads(2.0));
        assert_eq!(g1.len(), g2.len());
        let mut nonzero = false;
        for ((n1, a), (n2, b)) in g1.iter().zip(&g2) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
                nonzero |= *x != 0.0;
            }
        }
        assert!(nonzero);
    }

    #[test]
    fn lora_a_receives_gradient_once_b_is_nonzero() {
        let fx = fixture();
        let mut st = FddState::new(fx.teacher.clone(), quick(2, 0), &Stream::new(1)).unwrap();
        let b = batch(&fx, true);
        let is_a = |n: &str| n.starts_with("align.") && n.ends_with(".a");
        let (g, _) = st.student_gradients(&b, &fx.sched, &Stream::new(4)).unwrap();
        assert!(g.iter().filter(|(n, _)| is_a(n)).all(|(_, t)| t.max_abs() == 0.0));
        st.step(&b, &fx.sched, &Stream::new(4)).unwrap();
        let (g, _) = st.student_gradients(&b, &fx.sched, &Stream::new(4)).unwrap();
        assert!(g.iter().any(|(n, t)| is_a(n) && t.max_abs() > 0.0));
    }

    #[test]
    fn fixed_steps_without_kbin() {
        let fx = fixture();
        let st = FddState::new(fx.teacher.clone(), Ablation::NoKbin.apply(&quick(1, 0)), &Stream::new(1)).unwrap();
        let mut r = Stream::new(3);
        let first = st.draw(&mut r, &fx.sched).unwrap();
        for _ in 0..5 {
            assert_eq!(st.draw(&mut r, &fx.sched).unwrap(), first);
        }
        let kb = FddState::new(fx.teacher.clone(), quick(1, 0), &Stream::new(1)).unwrap();
        let draws: Vec<_> = (0..8).map(|_| kb.draw(&mut r, &fx.sched).unwrap()).collect();
        assert!(draws.iter().all(|d| d.is_valid(fx.sched.steps())));
        assert!(draws.iter().any(|d| d != &draws[0]));
    }

    #[test]
    fn tape_budget_overflow_names_k() {
        let fx = fixture();
        let cfg = FddConfig { tape_limit: 50, ..quick(1, 0) };
        let mut st = FddState::new(fx.teacher.clone(), cfg, &Stream::new(1)).unwrap();
        match st.step(&batch(&fx, true), &fx.sched, &Stream::new(4)) {
            Err(Error::TapeOverflow { k: 3, nodes }) => assert!(nodes > 50),
            other => panic!("expected tape overflow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn random_init_trains_every_component() {
        let fx = fixture();
        let mut st = FddState::new(fx.teacher.clone(), Ablation::RandomInit.apply(&quick(1, 0)), &Stream::new(1)).unwrap();
        assert_ne!(st.student.params.checksum(Component::Edit), fx.teacher.params.checksum(Component::Edit));
        let theta = st.student.params.checksum(Component::Theta);
        st.step(&batch(&fx, true), &fx.sched, &Stream::new(4)).unwrap();
        assert_ne!(st.student.params.checksum(Component::Theta), theta);
        assert_eq!(st.teacher.params.checksum(Component::Theta), theta);
    }

    #[test]
    fn ablation_presets() {
        let base = FddConfig::default();
        assert_eq!(Ablation::NoAlignment.apply(&base).total_iters(), 0);
        let s = Ablation::NoSds.apply(&base);
        assert_eq!((s.lambda, s.warmup_iters, s.adversarial_iters), (0.0, 0, 500));
        let d = Ablation::NoDisc.apply(&base);
        assert_eq!((d.warmup_iters, d.adversarial_iters), (1000, 0));
        assert!(!Ablation::NoKbin.apply(&base).kbin);
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("nope").is_err());
        assert_eq!((base.alpha, base.beta, base.lambda, base.k), (0.5, 0.5, 2.5, 3));
        assert_eq!((base.warmup_iters, base.adversarial_iters), (1000, 500));
    }

    #[test]
    fn edit_teacher_needs_its_conditions() {
        let fx = fixture();
        let b = batch(&fx, true);
        let conds = Conds {
            c_instruct: None,
            ..b.conds()
        };
        let draw = SdsDraw {
            ts: vec![4, 4],
            eps: Tensor::zeros(b.c_vid.shape()),
        };
        let tb = Binder::frozen(&fx.teacher.params);
        let r = sds_loss(&tb, &fx.teacher.cfg, Teacher::Edit, &b.c_vid, &conds, &draw, &fx.sched, Weighting::Unit);
        assert!(matches!(r, Err(Error::MissingCondition { .. })));
    }

    #[test]
    fn pool_is_deterministic_and_round_trips() {
        let fx = fixture();
        assert_eq!(fx.pool.len(), fx.points.len());
        assert_eq!(fx.pool.edit[0].shape(), fx.points[0].c_vid.shape());
        let again = TeacherPool::build(&fx.teacher, &fx.points, 2, &fx.sched, &Stream::new(3)).unwrap();
        assert!(again.video.iter().zip(&fx.pool.video).all(|(a, b)| a.bit_eq(b)));
        let dir = tempfile::tempdir().unwrap();
        fx.pool.save(dir.path()).unwrap();
        let back = TeacherPool::load(dir.path()).unwrap();
        assert!(back.edit.iter().zip(&fx.pool.edit).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn csv_leaves_missing_terms_empty() {
        let r = FddRecord {
            iter: 0,
            sds_edit: Some(1.0),
            sds_video: None,
            g_edit: None,
            g_video: None,
            d_edit: None,
            d_video: None,
            phase: Phase::Warmup,
        };
        let csv = records_csv(&[r]);
        assert!(csv.starts_with("iter,L_SDS-Edit,L_SDS-Video,L_G-Edit,L_G-Video,L_D-Edit,L_D-Video,phase\n"));
        assert!(csv.ends_with("0,1.000000e0,,,,,,sds\n"));
    }
}
