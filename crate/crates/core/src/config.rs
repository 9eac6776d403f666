//! Flat `key = value` run configuration with `#` comments. Every key has a
//! default; unknown keys and malformed values are rejected with their line.

use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fdd::{FddConfig, GLossForm, InitMode, SdsDraws, Weighting};
use crate::models::ModelConfig;
use crate::numerics::hex;
use crate::teachers::TrainConfig;
use crate::worldgen::DatasetPlan;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: DatasetPlan,
    pub model: ModelConfig,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub zero_terminal: bool,
    pub backbone_iters: usize,
    pub edit_iters: usize,
    pub video_iters: usize,
    /// Shared by the three teacher runs; `iters` is overridden per run.
    pub teacher: TrainConfig,
    pub fdd: FddConfig,
    /// Save a student checkpoint every this many FDD iterations (0 = never).
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: DatasetPlan::default(),
            model: ModelConfig::default(),
            steps: 64,
            schedule: ScheduleKind::Linear,
            zero_terminal: true,
            backbone_iters: 3000,
            edit_iters: 2000,
            video_iters: 2000,
            teacher: TrainConfig::default(),
            fdd: FddConfig::default(),
            checkpoint_every: 0,
            eval: EvalConfig::default(),
        }
    }
}

fn name_of<T: Copy + PartialEq>(v: T, table: &[(&'static str, T)]) -> &'static str {
    table.iter().find(|(_, t)| *t == v).map(|(n, _)| *n).expect("every variant is named")
}

fn from_name<T: Copy>(s: &str, table: &[(&'static str, T)]) -> std::result::Result<T, String> {
    table
        .iter()
        .find(|(n, _)| *n == s)
        .map(|(_, t)| *t)
        .ok_or_else(|| format!("expected one of {}", table.iter().map(|(n, _)| *n).collect::<Vec<_>>().join("|")))
}

const DRAWS: [(&str, SdsDraws); 2] = [("independent", SdsDraws::Independent), ("shared", SdsDraws::Shared)];
const GLOSS: [(&str, GLossForm); 2] = [("paper", GLossForm::Paper), ("standard_hinge", GLossForm::StandardHinge)];
const INIT: [(&str, InitMode); 2] = [("pretrained", InitMode::Pretrained), ("random", InitMode::Random)];
const WEIGHT: [(&str, Weighting); 2] = [("unit", Weighting::Unit), ("snr", Weighting::Snr)];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" => Ok(true),
        "false" | "off" => Ok(false),
        _ => Err(format!("expected true|false, got `{v}`")),
    }
}

macro_rules! keys {
    ($c:ident; $($key:literal => $field:expr, $parse:expr, $show:expr;)*) => {
        impl RunConfig {
            /// Every key in canonical order with its current value.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                let $c = self;
                vec![$(($key, { let f = &$field; $show($c, f) })),*]
            }

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                let $c = self;
                match key {
                    $($key => { $field = $parse(value)?; })*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }
        }
    };
}

fn show<T: ToString>(_: &RunConfig, v: &T) -> String {
    v.to_string()
}

keys! {
    c;
    "seed" => c.seed, parse, show;
    "world.height" => c.world.height, parse, show;
    "world.width" => c.world.width, parse, show;
    "world.frames" => c.world.frames, parse, show;
    "world.n_backbone" => c.world.n_backbone, parse, show;
    "world.n_edit" => c.world.n_edit, parse, show;
    "world.n_video" => c.world.n_video, parse, show;
    "world.n_fdd" => c.world.n_fdd, parse, show;
    "world.n_eval" => c.world.n_eval, parse, show;
    "world.train_seed" => c.world.train_seed, parse, show;
    "world.eval_seed" => c.world.eval_seed, parse, show;
    "model.c1" => c.model.c1, parse, show;
    "model.c2" => c.model.c2, parse, show;
    "model.emb" => c.model.emb, parse, show;
    "model.groups" => c.model.groups, parse, show;
    "model.instr_dim" => c.model.instr_dim, parse, show;
    "model.max_frames" => c.model.max_frames, parse, show;
    "model.first_frame" => c.model.first_frame, parse_bool, show;
    "model.lora_rank" => c.model.lora_rank, parse, show;
    "model.lora_alpha" => c.model.lora_alpha, parse, show;
    "model.disc_dim" => c.model.disc_dim, parse, show;
    "schedule.steps" => c.steps, parse, show;
    "schedule.kind" => c.schedule, parse, show;
    "schedule.zero_terminal" => c.zero_terminal, parse_bool, show;
    "teacher.backbone_iters" => c.backbone_iters, parse, show;
    "teacher.edit_iters" => c.edit_iters, parse, show;
    "teacher.video_iters" => c.video_iters, parse, show;
    "teacher.batch" => c.teacher.batch, parse, show;
    "teacher.lr" => c.teacher.lr, parse, show;
    "teacher.eval_every" => c.teacher.eval_every, parse, show;
    "teacher.heldout" => c.teacher.heldout, parse, show;
    "teacher.first_frame_p" => c.teacher.first_frame_p, parse, show;
    "fdd.k" => c.fdd.k, parse, show;
    "fdd.alpha" => c.fdd.alpha, parse, show;
    "fdd.beta" => c.fdd.beta, parse, show;
    "fdd.lambda" => c.fdd.lambda, parse, show;
    "fdd.warmup_iters" => c.fdd.warmup_iters, parse, show;
    "fdd.adversarial_iters" => c.fdd.adversarial_iters, parse, show;
    "fdd.sds_draws" => c.fdd.sds_draws, |v| from_name(v, &DRAWS), |_, v: &SdsDraws| name_of(*v, &DRAWS).to_string();
    "fdd.g_loss" => c.fdd.g_loss, |v| from_name(v, &GLOSS), |_, v: &GLossForm| name_of(*v, &GLOSS).to_string();
    "fdd.kbin" => c.fdd.kbin, parse_bool, show;
    "fdd.init" => c.fdd.init, |v| from_name(v, &INIT), |_, v: &InitMode| name_of(*v, &INIT).to_string();
    "fdd.lr" => c.fdd.lr, parse, show;
    "fdd.disc_lr" => c.fdd.disc_lr, parse, show;
    "fdd.batch" => c.fdd.batch, parse, show;
    "fdd.teacher_steps" => c.fdd.teacher_steps, parse, show;
    "fdd.t_min" => c.fdd.t_min, parse, show;
    "fdd.t_max" => c.fdd.t_max, parse, show;
    "fdd.weighting" => c.fdd.weighting, |v| from_name(v, &WEIGHT), |_, v: &Weighting| name_of(*v, &WEIGHT).to_string();
    "fdd.tape_limit" => c.fdd.tape_limit, parse, show;
    "fdd.checkpoint_every" => c.checkpoint_every, parse, show;
    "eval.steps" => c.eval.steps, parse, show;
    "eval.first_steps" => c.eval.first_steps, parse, show;
    "eval.ppm_items" => c.eval.ppm_items, parse, show;
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply(text)?;
        Ok(c)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(|m| err(format!("{}: {m}", k.trim())))?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Config { line: 0, msg };
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        self.fdd.validate(self.steps).map_err(|e| bad(e.to_string()))?;
        if self.world.train_seed == self.world.eval_seed {
            return Err(bad("world.train_seed and world.eval_seed must differ".into()));
        }
        if self.world.frames > self.model.max_frames {
            return Err(bad("world.frames exceeds model.max_frames".into()));
        }
        if self.eval.steps == 0 || self.eval.steps > self.steps || self.eval.first_steps == 0 || self.eval.first_steps > self.steps {
            return Err(bad("eval step counts must lie in 1..=schedule.steps".into()));
        }
        Ok(())
    }

    /// The resolved configuration, one `key = value` line per key.
    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes())[..8])
    }

    /// Hash of the keys that determine the teacher samples: everything
    /// except the alignment and evaluation knobs (`fdd.teacher_steps` stays).
    pub fn teacher_hash(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| *k == "fdd.teacher_steps" || !(k.starts_with("fdd.") || k.starts_with("eval.")))
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        hex(&Sha256::digest(text.as_bytes())[..8])
    }

    /// Write `config.txt` (resolved) and `config.hash` into `dir`.
    pub fn stamp(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.render())?;
        std::fs::write(dir.join("config.hash"), format!("{}\n", self.hash()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.schedule, self.zero_terminal)
    }

    pub fn train_config(&self, iters: usize) -> TrainConfig {
        TrainConfig { iters, ..self.teacher.clone() }
    }

    /// Paper-scale teacher and FDD budgets (1500 teacher iterations at
    /// batch 64 and lr 1e-5; FDD 1000 SDS + 500 adversarial iterations).
    pub fn paper_scale() -> RunConfig {
        let mut c = RunConfig::default();
        c.backbone_iters = 1500;
        c.edit_iters = 1500;
        c.video_iters = 1500;
        c.teacher.batch = 64;
        c.teacher.lr = 1e-5;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.fdd.g_loss = GLossForm::StandardHinge;
        c.teacher.lr = 3e-4;
        c.model.first_frame = false;
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::parse("# comment\nseed = 3\nfdd.lamda = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        assert!(matches!(RunConfig::parse("fdd.k = three").unwrap_err(), Error::Config { line: 1, .. }));
        assert!(matches!(RunConfig::parse("no equals sign").unwrap_err(), Error::Config { line: 1, .. }));
    }

    #[test]
    fn comments_and_whitespace() {
        let c = RunConfig::parse("  fdd.k=5   # more steps\n\nfdd.init = random\n").unwrap();
        assert_eq!(c.fdd.k, 5);
        assert_eq!(c.fdd.init, InitMode::Random);
    }

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = RunConfig::default();
        assert_eq!((c.backbone_iters, c.edit_iters, c.video_iters), (3000, 2000, 2000));
        assert_eq!((c.teacher.batch, c.teacher.lr), (16, 1e-4));
        assert_eq!((c.world.height, c.world.width, c.world.frames, c.steps), (16, 16, 4, 64));
        assert_eq!(c.fdd.teacher_steps, 16);
        let p = RunConfig::paper_scale();
        assert_eq!((p.backbone_iters, p.teacher.batch, p.teacher.lr), (1500, 64, 1e-5));
        assert_eq!((p.fdd.warmup_iters, p.fdd.adversarial_iters), (1000, 500));
    }

    #[test]
    fn inconsistent_values_rejected() {
        assert!(RunConfig::parse("world.eval_seed = 1\n").is_err());
        assert!(RunConfig::parse("fdd.k = 100\n").is_err());
        assert!(RunConfig::parse("model.groups = 5\n").is_err());
    }

    #[test]
    fn teacher_hash_ignores_alignment_knobs() {
        let base = RunConfig::default();
        let mut c = base.clone();
        c.apply("fdd.lr = 0.5\nfdd.warmup_iters = 3\neval.steps = 5").unwrap();
        assert_eq!(c.teacher_hash(), base.teacher_hash());
        assert_ne!(c.hash(), base.hash());
        c.apply("fdd.teacher_steps = 8").unwrap();
        assert_ne!(c.teacher_hash(), base.teacher_hash());
        let mut m = base.clone();
        m.apply("model.c1 = 16").unwrap();
        assert_ne!(m.teacher_hash(), base.teacher_hash());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::load(&dir.join("paper-scale.conf")).unwrap(), RunConfig::paper_scale());
        let acc = RunConfig::load(&dir.join("acceptance.conf")).unwrap();
        assert_eq!((acc.world.height, acc.world.width, acc.world.frames, acc.steps), (16, 16, 4, 64));
    }
}
