//! The per-frame denoising backbone: a two-level UNet with FiLM conditioning
//! on the timestep and the mean caption embedding.

use super::edit::EditResiduals;
use super::layers::{conv, init_resblock, linear, norm, resblock, timestep_embedding, token_mean};
use super::params::{Binder, Init};
use super::video::{temporal, Temporal};
use super::ModelConfig;
use crate::error::Result;
use crate::numerics::Var;
use crate::vocab::{self, Token};

pub fn init_backbone(cfg: &ModelConfig, init: &mut Init) -> Result<()> {
    let (c1, c2, d) = (cfg.c1, cfg.c2, cfg.emb);
    init.table("theta.tok", vocab::vocab_size(), d, 0.5)?;
    init.linear("theta.t1", d, d)?;
    init.linear("theta.t2", d, d)?;
    init.conv("theta.in", c1, cfg.channels, 3)?;
    init_encoder(cfg, init, "theta")?;
    init.conv("theta.u2", c2, c2, 3)?;
    init_resblock(init, "theta.r2", 2 * c2, c2, d)?;
    init.conv("theta.u1", c1, c2, 3)?;
    init_resblock(init, "theta.r1", 2 * c1, c1, d)?;
    init.norm("theta.on", c1)?;
    init.conv("theta.out", cfg.channels, c1, 3)
}

/// Encoder and middle block parameters under `pre` (shared by the edit adapter copy).
pub fn init_encoder(cfg: &ModelConfig, init: &mut Init, pre: &str) -> Result<()> {
    let (c1, c2, d) = (cfg.c1, cfg.c2, cfg.emb);
    init_resblock(init, &format!("{pre}.e1"), c1, c1, d)?;
    init.conv(&format!("{pre}.d1"), c1, c1, 3)?;
    init_resblock(init, &format!("{pre}.e2"), c1, c2, d)?;
    init.conv(&format!("{pre}.d2"), c2, c2, 3)?;
    init_resblock(init, &format!("{pre}.mid"), c2, c2, d)
}

/// Conditioning embedding `[N, emb]` (before activation) for one timestep
/// and one caption per row.
pub fn embed(b: &Binder, cfg: &ModelConfig, ts: &[usize], captions: &[&[Token]]) -> Result<Var> {
    let t = Var::constant(timestep_embedding(ts, cfg.emb));
    let t = linear(b, "theta.t2", &linear(b, "theta.t1", &t)?.silu())?;
    t.add(&token_mean(b, "theta.tok", captions)?)
}

/// Skip features of the encoder: full, half and quarter resolution.
pub struct Skips {
    pub s1: Var,
    pub s2: Var,
    pub mid: Var,
}

pub fn encoder(b: &Binder, cfg: &ModelConfig, pre: &str, h0: &Var, cond: &Var, tmp: Option<&Temporal>) -> Result<Skips> {
    let g = cfg.groups;
    let mut s1 = resblock(b, &format!("{pre}.e1"), h0, cond, g)?;
    if let Some(t) = tmp {
        s1 = temporal(b, cfg, "video.l1", &s1, t)?;
    }
    let h = conv(b, &format!("{pre}.d1"), &s1, 2, 1)?;
    let mut s2 = resblock(b, &format!("{pre}.e2"), &h, cond, g)?;
    if let Some(t) = tmp {
        s2 = temporal(b, cfg, "video.l2", &s2, t)?;
    }
    let h = conv(b, &format!("{pre}.d2"), &s2, 2, 1)?;
    let mut mid = resblock(b, &format!("{pre}.mid"), &h, cond, g)?;
    if let Some(t) = tmp {
        mid = temporal(b, cfg, "video.lm", &mid, t)?;
    }
    Ok(Skips { s1, s2, mid })
}

/// Backbone v-prediction for `x` `[N, C, H, W]` given the activated
/// conditioning, with optional adapter hooks.
pub fn forward(b: &Binder, cfg: &ModelConfig, x: &Var, cond: &Var, edit: Option<&EditResiduals>, tmp: Option<&Temporal>) -> Result<Var> {
    let g = cfg.groups;
    let h0 = conv(b, "theta.in", x, 1, 1)?;
    let Skips { mut s1, mut s2, mut mid } = encoder(b, cfg, "theta", &h0, cond, tmp)?;
    if let Some(e) = edit {
        s1 = s1.add(&e.s1)?;
        s2 = s2.add(&e.s2)?;
        mid = mid.add(&e.mid)?;
    }
    let h = conv(b, "theta.u2", &mid.upsample2x()?, 1, 1)?;
    let mut h = resblock(b, "theta.r2", &Var::concat(&[h, s2], 1)?, cond, g)?;
    if let Some(t) = tmp {
        h = temporal(b, cfg, "video.l3", &h, t)?;
    }
    let h = conv(b, "theta.u1", &h.upsample2x()?, 1, 1)?;
    let mut h = resblock(b, "theta.r1", &Var::concat(&[h, s1], 1)?, cond, g)?;
    if let Some(t) = tmp {
        h = temporal(b, cfg, "video.l4", &h, t)?;
    }
    conv(b, "theta.out", &norm(b, "theta.on", &h, g)?.silu(), 1, 1)
}

/// Frozen feature network: the backbone encoder at `t = 1` with the null
/// caption. Binds `theta` without LoRA regardless of the caller's binder.
pub fn features(b: &Binder, cfg: &ModelConfig, x: &Var) -> Result<Skips> {
    let plain = Binder::frozen(b.store());
    let n = x.shape()[0];
    let null: Vec<&[Token]> = vec![&[vocab::NULL]; n];
    let cond = embed(&plain, cfg, &vec![1; n], &null)?.silu();
    let h0 = conv(&plain, "theta.in", x, 1, 1)?;
    encoder(&plain, cfg, "theta", &h0, &cond, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Model;
    use crate::numerics::Tensor;
    use crate::rng::Stream;

    fn small() -> ModelConfig {
        ModelConfig {
            c1: 8,
            c2: 16,
            emb: 16,
            groups: 4,
            ..Default::default()
        }
    }

    fn run(m: &Model, x: &Tensor, ts: &[usize], caps: &[&[Token]]) -> Tensor {
        let b = Binder::frozen(&m.params);
        let cond = embed(&b, &m.cfg, ts, caps).unwrap().silu();
        forward(&b, &m.cfg, &Var::constant(x.clone()), &cond, None, None).unwrap().value().clone()
    }

    #[test]
    fn output_matches_input_shape() {
        let m = Model::new(small(), &Stream::new(1)).unwrap();
        let x = Stream::new(2).normal_tensor(&[3, 3, 16, 16]);
        assert_eq!(run(&m, &x, &[5, 6, 7], &[&[1], &[2], &[3]]).shape(), &[3, 3, 16, 16]);
    }

    #[test]
    fn zero_output_conv_gives_zero_output() {
        let mut m = Model::new(small(), &Stream::new(1)).unwrap();
        *m.params.get_mut("theta.out.w").unwrap() = Tensor::zeros(&[3, 8, 3, 3]);
        let x = Stream::new(2).normal_tensor(&[2, 3, 16, 16]);
        assert!(run(&m, &x, &[5], &[&[1], &[2]]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frames_are_processed_independently() {
        let m = Model::new(small(), &Stream::new(1)).unwrap();
        let x = Stream::new(2).normal_tensor(&[3, 3, 16, 16]);
        let caps: [&[Token]; 3] = [&[1], &[2], &[3]];
        let out = run(&m, &x, &[4, 9, 2], &caps);
        let perm = [2, 0, 1];
        let xp = Tensor::cat0(&perm.map(|i| x.slice0(i, 1).unwrap())).unwrap();
        let outp = run(&m, &xp, &[2, 4, 9], &[caps[2], caps[0], caps[1]]);
        for (j, &i) in perm.iter().enumerate() {
            assert!(outp.slice0(j, 1).unwrap().bit_eq(&out.slice0(i, 1).unwrap()));
        }
    }

    #[test]
    fn unknown_token_rejected() {
        let m = Model::new(small(), &Stream::new(1)).unwrap();
        let b = Binder::frozen(&m.params);
        assert!(embed(&b, &m.cfg, &[3], &[&[500]]).is_err());
    }
}
