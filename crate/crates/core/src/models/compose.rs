//! Variant compositions: backbone, edit teacher (psi), video teacher (rho),
//! plug-and-play (eta) and the LoRA student (phi).

use super::edit::residuals;
use super::params::Binder;
use super::unet::{embed, forward};
use super::video::Temporal;
use super::{Model, ModelConfig};
use crate::diffusion::{ddim_from_noise, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::numerics::{Tensor, Var};
use crate::rng::Stream;
use crate::vocab::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Backbone,
    /// Backbone + edit adapter, frames independent.
    Psi,
    /// Backbone + temporal layers.
    Rho,
    /// Both adapters, no LoRA.
    Eta,
    /// Both adapters with LoRA deltas on the backbone.
    Phi,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::Psi => "psi",
            Variant::Rho => "rho",
            Variant::Eta => "eta",
            Variant::Phi => "phi",
        }
    }

    fn uses_edit(self) -> bool {
        matches!(self, Variant::Psi | Variant::Eta | Variant::Phi)
    }

    fn uses_video(self) -> bool {
        matches!(self, Variant::Rho | Variant::Eta | Variant::Phi)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Conditions for a batch of `B` clips of `frames` frames (`N = B * frames` rows).
#[derive(Clone, Copy)]
pub struct Conds<'a> {
    pub frames: usize,
    /// Output caption per clip.
    pub c_out: &'a [Vec<Token>],
    /// Instruction per clip; token 0 is the task label.
    pub c_instruct: Option<&'a [Vec<Token>]>,
    /// Input video rows `[N, C, H, W]`; row `i` is the edit adapter's input frame for row `i`.
    pub c_vid: Option<&'a Var>,
    /// First-frame condition per clip `[B, C, H, W]`.
    pub first: Option<&'a Var>,
}

impl Conds<'_> {
    pub fn rows<T: Clone>(&self, per_clip: &[T]) -> Vec<T> {
        per_clip.iter().flat_map(|x| std::iter::repeat(x.clone()).take(self.frames)).collect()
    }
}

fn expand_ts(ts: &[usize], clips: usize, frames: usize) -> Result<Vec<usize>> {
    let n = clips * frames;
    match ts.len() {
        1 => Ok(vec![ts[0]; n]),
        l if l == n => Ok(ts.to_vec()),
        l if l == clips => Ok(ts.iter().flat_map(|&t| std::iter::repeat(t).take(frames)).collect()),
        l => Err(invalid("compose_forward", format!("{l} timesteps for {clips} clips of {frames} frames"))),
    }
}

/// v-prediction of `variant` for noisy rows `x_t` `[N, C, H, W]`.
pub fn compose_forward(b: &Binder, cfg: &ModelConfig, variant: Variant, x_t: &Var, ts: &[usize], conds: &Conds) -> Result<Var> {
    let missing = |what: &'static str| Error::MissingCondition {
        variant: variant.name(),
        missing: what,
    };
    match (variant, b.lora()) {
        (Variant::Phi, None) => return Err(invalid("compose_forward", "phi needs a LoRA binding")),
        (v, Some(_)) if v != Variant::Phi => {
            return Err(invalid("compose_forward", format!("{v} must not be bound with LoRA")))
        }
        _ => {}
    }
    let f = conds.frames;
    let n = x_t.shape()[0];
    let clips = conds.c_out.len();
    if f == 0 || clips * f != n {
        return Err(invalid(
            "compose_forward",
            format!("{n} rows do not match {clips} captions of {f} frames"),
        ));
    }
    let ts = expand_ts(ts, clips, f)?;
    let captions = conds.rows(conds.c_out);
    let caption_refs: Vec<&[Token]> = captions.iter().map(|c| c.as_slice()).collect();
    let cond = embed(b, cfg, &ts, &caption_refs)?;
    let act = cond.silu();

    let edit = if variant.uses_edit() {
        let instr = conds.c_instruct.ok_or_else(|| missing("c_instruct"))?;
        let c_img = conds.c_vid.ok_or_else(|| missing("c_vid"))?;
        if instr.len() != clips {
            return Err(invalid("compose_forward", "one instruction per clip required"));
        }
        if c_img.shape() != x_t.shape() {
            return Err(Error::ShapeMismatch {
                op: "compose_forward",
                lhs: x_t.shape().to_vec(),
                rhs: c_img.shape().to_vec(),
            });
        }
        if instr.iter().any(|i| i.is_empty()) {
            return Err(missing("task label"));
        }
        let rows = conds.rows(instr);
        let refs: Vec<&[Token]> = rows.iter().map(|c| c.as_slice()).collect();
        Some(residuals(b, cfg, x_t, c_img, &refs, &cond)?)
    } else {
        None
    };
    let tmp = if variant.uses_video() {
        Some(Temporal {
            frames: f,
            cond: act.clone(),
            first: conds.first.cloned(),
        })
    } else {
        None
    };
    forward(b, cfg, x_t, &act, edit.as_ref(), tmp.as_ref())
}

/// DDIM from `noise` through `steps` with `variant`. Stays on the tape when
/// the binder has trainable leaves.
pub fn sample_with(b: &Binder, cfg: &ModelConfig, variant: Variant, conds: &Conds, noise: Var, steps: &[usize], sched: &NoiseSchedule) -> Result<Var> {
    ddim_from_noise(|x, t| compose_forward(b, cfg, variant, x, &[t], conds), noise, steps, sched)
}

/// Binder for inference with `variant` (LoRA only for phi).
pub fn inference_binder(model: &Model, variant: Variant) -> Binder<'_> {
    let b = Binder::frozen(&model.params);
    if variant == Variant::Phi {
        b.with_lora(model.cfg.lora())
    } else {
        b
    }
}

/// Inference sample with fresh noise from `rng`.
pub fn sample_variant(model: &Model, variant: Variant, conds: &Conds, shape: &[usize], steps: &[usize], sched: &NoiseSchedule, rng: &mut Stream) -> Result<Tensor> {
    let b = inference_binder(model, variant);
    let noise = Var::constant(rng.normal_tensor(shape));
    Ok(sample_with(&b, &model.cfg, variant, conds, noise, steps, sched)?.value().clone())
}

/// Edit one clip `[F, C, H, W]` with eta or phi. With first-frame
/// conditioning the first frame is edited by psi and the video variant is
/// conditioned on it (unless `first` is supplied).
#[allow(clippy::too_many_arguments)]
pub fn edit_clip(
    model: &Model,
    variant: Variant,
    video: &Tensor,
    c_out: &[Token],
    c_instruct: &[Token],
    first: Option<&Tensor>,
    steps: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Stream,
) -> Result<Tensor> {
    if !matches!(variant, Variant::Eta | Variant::Phi | Variant::Psi) {
        return Err(invalid("edit_clip", format!("{variant} is not an editing variant")));
    }
    let f = video.shape()[0];
    let c_out = [c_out.to_vec()];
    let c_ins = [c_instruct.to_vec()];
    let c_vid = Var::constant(video.clone());
    let first = match (first, model.cfg.first_frame && variant != Variant::Psi) {
        (_, false) => None,
        (Some(t), true) => Some(t.clone()),
        (None, true) => {
            let frame0 = Var::constant(video.slice0(0, 1)?);
            let conds = Conds {
                frames: 1,
                c_out: &c_out,
                c_instruct: Some(&c_ins),
                c_vid: Some(&frame0),
                first: None,
            };
            let mut r = rng.split("first");
            Some(sample_variant(model, Variant::Psi, &conds, frame0.shape(), steps, sched, &mut r)?)
        }
    };
    let first = first.map(Var::constant);
    let conds = Conds {
        frames: f,
        c_out: &c_out,
        c_instruct: Some(&c_ins),
        c_vid: Some(&c_vid),
        first: first.as_ref(),
    };
    sample_variant(model, variant, &conds, video.shape(), steps, sched, rng)
}

/// Edit a clip longer than the trained window with consecutive windows of
/// `window` frames. Each window after the first is conditioned on the last
/// edited frame of the previous one.
#[allow(clippy::too_many_arguments)]
pub fn edit_longer_video(
    model: &Model,
    variant: Variant,
    video: &Tensor,
    window: usize,
    c_out: &[Token],
    c_instruct: &[Token],
    steps: &[usize],
    sched: &NoiseSchedule,
    rng: &mut Stream,
) -> Result<Tensor> {
    let total = video.shape()[0];
    if window == 0 || total < window {
        return Err(invalid(
            "edit_longer_video",
            format!("{total} frames is shorter than the {window}-frame window; edit it directly"),
        ));
    }
    let mut out: Vec<Tensor> = Vec::new();
    let mut start = 0;
    let mut j = 0;
    while start < total {
        let len = window.min(total - start);
        let clip = video.slice0(start, len)?;
        let prev = match out.last() {
            Some(last) => Some(last.slice0(last.shape()[0] - 1, 1)?),
            None => None,
        };
        let mut r = rng.split_index(j);
        out.push(edit_clip(model, variant, &clip, c_out, c_instruct, prev.as_ref(), steps, sched, &mut r)?);
        start += len;
        j += 1;
    }
    Tensor::cat0(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    fn model() -> Model {
        let cfg = ModelConfig {
            c1: 8,
            c2: 16,
            emb: 16,
            groups: 4,
            instr_dim: 4,
            ..Default::default()
        };
        let rng = Stream::new(11);
        let mut m = Model::new(cfg, &rng).unwrap();
        m.attach_edit(&rng).unwrap();
        m.attach_video(&rng).unwrap();
        m.attach_lora(&rng).unwrap();
        m
    }

    struct Batch {
        x: Var,
        vid: Var,
        first: Var,
        c_out: Vec<Vec<Token>>,
        c_ins: Vec<Vec<Token>>,
    }

    fn batch(seed: u64) -> Batch {
        let mut r = Stream::new(seed);
        Batch {
            x: Var::constant(r.normal_tensor(&[8, 3, 16, 16])),
            vid: Var::constant(r.normal_tensor(&[8, 3, 16, 16])),
            first: Var::constant(r.normal_tensor(&[2, 3, 16, 16])),
            c_out: vec![vec![1, 4, 16, 12, 20], vec![2, 6, 17, 10, 18]],
            c_ins: vec![vec![45, 6], vec![42]],
        }
    }

    fn run(m: &Model, v: Variant, bt: &Batch) -> Tensor {
        let conds = Conds {
            frames: 4,
            c_out: &bt.c_out,
            c_instruct: Some(&bt.c_ins),
            c_vid: Some(&bt.vid),
            first: Some(&bt.first),
        };
        let b = inference_binder(m, v);
        compose_forward(&b, &m.cfg, v, &bt.x, &[7, 30], &conds).unwrap().value().clone()
    }

    #[test]
    fn zero_init_identities_are_bit_exact() {
        let m = model();
        for seed in 0..3 {
            let bt = batch(seed);
            let base = run(&m, Variant::Backbone, &bt);
            assert!(run(&m, Variant::Psi, &bt).bit_eq(&base));
            assert!(run(&m, Variant::Rho, &bt).bit_eq(&base));
            assert!(run(&m, Variant::Phi, &bt).bit_eq(&run(&m, Variant::Eta, &bt)));
        }
    }

    #[test]
    fn missing_conditions_name_the_variant() {
        let m = model();
        let bt = batch(1);
        let conds = Conds {
            frames: 4,
            c_out: &bt.c_out,
            c_instruct: None,
            c_vid: Some(&bt.vid),
            first: None,
        };
        let b = inference_binder(&m, Variant::Eta);
        let err = compose_forward(&b, &m.cfg, Variant::Eta, &bt.x, &[3], &conds).unwrap_err();
        assert!(matches!(err, Error::MissingCondition { variant: "eta", missing: "c_instruct" }));
    }

    #[test]
    fn longer_video_uses_whole_windows() {
        let m = model();
        let sched = NoiseSchedule::new(16, ScheduleKind::Linear, true).unwrap();
        let video = Stream::new(3).normal_tensor(&[8, 3, 16, 16]).map(|v| v.clamp(-1.0, 1.0));
        let out = edit_longer_video(&m, Variant::Eta, &video, 4, &[1, 4], &[45, 6], &[16, 8], &sched, &mut Stream::new(4)).unwrap();
        assert_eq!(out.shape(), &[8, 3, 16, 16]);
        assert!(edit_longer_video(&m, Variant::Eta, &video.slice0(0, 2).unwrap(), 4, &[1], &[45], &[16], &sched, &mut Stream::new(4)).is_err());
        let one = edit_longer_video(&m, Variant::Eta, &video.slice0(0, 4).unwrap(), 4, &[1, 4], &[45, 6], &[16, 8], &sched, &mut Stream::new(4)).unwrap();
        let direct = edit_clip(&m, Variant::Eta, &video.slice0(0, 4).unwrap(), &[1, 4], &[45, 6], None, &[16, 8], &sched, &mut Stream::new(4).split_index(0)).unwrap();
        assert!(one.bit_eq(&direct));
    }
}
