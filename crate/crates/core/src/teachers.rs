//! Supervised training of the three teacher components: the backbone, the
//! edit adapter (backbone frozen) and the video adapter (backbone frozen).

use crate::diffusion::{q_sample, v_target, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::models::{compose_forward, Binder, Component, Conds, Model, Variant};
use crate::numerics::{Adam, AdamConfig, Tensor, Var};
use crate::rng::Stream;
use crate::train::{step, LossLog};
use crate::vocab::Token;
use crate::worldgen::{EditPair, FrameItem, VideoItem};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    /// Frames per batch (video batches hold `batch / F` clips).
    pub batch: usize,
    pub lr: f32,
    /// Held-out loss is logged every this many iterations.
    pub eval_every: usize,
    /// Items reserved for the held-out split.
    pub heldout: usize,
    /// Probability that a video batch carries its first-frame condition.
    pub first_frame_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch: 16,
            lr: 1e-4,
            eval_every: 100,
            heldout: 32,
            first_frame_p: 0.5,
        }
    }
}

fn stack(parts: impl IntoIterator<Item = Tensor>) -> Result<Tensor> {
    Tensor::cat0(&parts.into_iter().collect::<Vec<_>>())
}

fn v_loss(pred: &Var, x0: &Var, ts: &[usize], eps: &Var, sched: &NoiseSchedule) -> Result<Var> {
    Ok(pred.sub(&v_target(x0, ts, eps, sched)?)?.square().mean())
}

fn split(n: usize, heldout: usize) -> (usize, usize) {
    if n < 2 {
        return (n, 0);
    }
    let h = heldout.min(n / 4).max(1);
    (n - h, h)
}

/// Shared loop: `loss_on(binder, item indices, rng)` builds one batch loss.
fn fit(
    model: &mut Model,
    trainable: Component,
    frozen: &[Component],
    n_items: usize,
    per_batch: usize,
    cfg: &TrainConfig,
    rng: &Stream,
    loss_on: impl Fn(&Binder, &[usize], &mut Stream) -> Result<Var>,
) -> Result<LossLog> {
    if n_items == 0 {
        return Err(invalid("train", "empty training set"));
    }
    let (n_train, n_held) = split(n_items, cfg.heldout);
    let held: Vec<usize> = if n_held == 0 { (0..n_train).collect() } else { (n_train..n_items).collect() };
    let before: Vec<String> = frozen.iter().map(|&c| model.params.checksum(c)).collect();
    let heldout_loss = |model: &Model| -> Result<f64> {
        let b = Binder::frozen(&model.params);
        let mut rng = rng.split("heldout");
        let mut total = 0.0;
        let chunks: Vec<&[usize]> = held.chunks(per_batch.max(1)).collect();
        for c in &chunks {
            total += loss_on(&b, c, &mut rng)?.value().item() as f64 * c.len() as f64;
        }
        Ok(total / held.len() as f64)
    };

    let mut log = LossLog::default();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    log.push(0, "heldout", heldout_loss(model)?);
    for it in 0..cfg.iters {
        let mut r = rng.split("iter").split_index(it as u64);
        let idx: Vec<usize> = (0..per_batch).map(|_| r.range(0, n_train - 1)).collect();
        let loss = step(&mut model.params, &mut adam, &[trainable], None, it, |b| loss_on(b, &idx, &mut r))?;
        log.push(it + 1, "train", loss);
        if (it + 1) % cfg.eval_every.max(1) == 0 || it + 1 == cfg.iters {
            log.push(it + 1, "heldout", heldout_loss(model)?);
        }
    }
    for (&c, sum) in frozen.iter().zip(&before) {
        if &model.params.checksum(c) != sum {
            return Err(Error::FrozenGradient(c.tag().to_string()));
        }
    }
    Ok(log)
}

fn random_ts(n: usize, total: usize, r: &mut Stream) -> Vec<usize> {
    (0..n).map(|_| r.range(1, total)).collect()
}

/// Text-to-image analogue: v-prediction loss on captioned frames.
pub fn pretrain_backbone(model: &mut Model, data: &[FrameItem], sched: &NoiseSchedule, cfg: &TrainConfig, rng: &Stream) -> Result<LossLog> {
    let mcfg = model.cfg.clone();
    fit(model, Component::Theta, &[], data.len(), cfg.batch, cfg, rng, |b, idx, r| {
        let x0 = Var::constant(stack(idx.iter().map(|&i| data[i].frame.clone()))?);
        let caps: Vec<Vec<Token>> = idx.iter().map(|&i| data[i].caption.clone()).collect();
        let ts = random_ts(idx.len(), sched.steps(), r);
        let eps = Var::constant(r.normal_tensor(x0.shape()));
        let xt = q_sample(&x0, &ts, &eps, sched)?;
        let conds = Conds {
            frames: 1,
            c_out: &caps,
            c_instruct: None,
            c_vid: None,
            first: None,
        };
        let v = compose_forward(b, &mcfg, Variant::Backbone, &xt, &ts, &conds)?;
        v_loss(&v, &x0, &ts, &eps, sched)
    })
}

/// Edit adapter on single-frame pairs: the backbone sees the output caption,
/// the adapter sees the input frame and the instruction.
pub fn train_edit_adapter(model: &mut Model, pairs: &[EditPair], sched: &NoiseSchedule, cfg: &TrainConfig, rng: &Stream) -> Result<LossLog> {
    if !model.params.has_component(Component::Edit) {
        return Err(invalid("train_edit_adapter", "model has no edit adapter attached"));
    }
    let mcfg = model.cfg.clone();
    fit(model, Component::Edit, &[Component::Theta], pairs.len(), cfg.batch, cfg, rng, |b, idx, r| {
        let x0 = Var::constant(stack(idx.iter().map(|&i| pairs[i].target.clone()))?);
        let c_img = Var::constant(stack(idx.iter().map(|&i| pairs[i].c_img.clone()))?);
        let c_out: Vec<Vec<Token>> = idx.iter().map(|&i| pairs[i].c_out.clone()).collect();
        let c_ins: Vec<Vec<Token>> = idx.iter().map(|&i| pairs[i].c_instruct.clone()).collect();
        let ts = random_ts(idx.len(), sched.steps(), r);
        let eps = Var::constant(r.normal_tensor(x0.shape()));
        let xt = q_sample(&x0, &ts, &eps, sched)?;
        let conds = Conds {
            frames: 1,
            c_out: &c_out,
            c_instruct: Some(&c_ins),
            c_vid: Some(&c_img),
            first: None,
        };
        let v = compose_forward(b, &mcfg, Variant::Psi, &xt, &ts, &conds)?;
        v_loss(&v, &x0, &ts, &eps, sched)
    })
}

/// Temporal layers on captioned clips, one timestep per clip.
pub fn train_video_adapter(model: &mut Model, videos: &[VideoItem], sched: &NoiseSchedule, cfg: &TrainConfig, rng: &Stream) -> Result<LossLog> {
    if !model.params.has_component(Component::Video) {
        return Err(invalid("train_video_adapter", "model has no video adapter attached"));
    }
    let frames = videos.first().map(|v| v.video.shape()[0]).unwrap_or(1);
    let clips = (cfg.batch / frames).max(1);
    let mcfg = model.cfg.clone();
    let p_first = cfg.first_frame_p;
    fit(model, Component::Video, &[Component::Theta], videos.len(), clips, cfg, rng, |b, idx, r| {
        let x0t = stack(idx.iter().map(|&i| videos[i].video.clone()))?;
        let x0 = Var::constant(x0t);
        let caps: Vec<Vec<Token>> = idx.iter().map(|&i| videos[i].caption.clone()).collect();
        let ts = random_ts(idx.len(), sched.steps(), r);
        let rows: Vec<usize> = ts.iter().flat_map(|&t| std::iter::repeat(t).take(frames)).collect();
        let eps = Var::constant(r.normal_tensor(x0.shape()));
        let xt = q_sample(&x0, &rows, &eps, sched)?;
        let first = if mcfg.first_frame && r.bernoulli(p_first) {
            Some(Var::constant(stack(
                idx.iter().map(|&i| videos[i].video.slice0(0, 1)).collect::<Result<Vec<_>>>()?,
            )?))
        } else {
            None
        };
        let conds = Conds {
            frames,
            c_out: &caps,
            c_instruct: None,
            c_vid: None,
            first: first.as_ref(),
        };
        let v = compose_forward(b, &mcfg, Variant::Rho, &xt, &ts, &conds)?;
        v_loss(&v, &x0, &rows, &eps, sched)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::models::ModelConfig;
    use crate::worldgen::{build_datasets, DatasetPlan};

    fn model() -> Model {
        let cfg = ModelConfig {
            c1: 8,
            c2: 16,
            emb: 16,
            groups: 4,
            instr_dim: 4,
            ..Default::default()
        };
        let rng = Stream::new(5);
        let mut m = Model::new(cfg, &rng).unwrap();
        m.attach_edit(&rng).unwrap();
        m.attach_video(&rng).unwrap();
        m
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            iters: 3,
            batch: 4,
            lr: 1e-3,
            eval_every: 2,
            heldout: 2,
            first_frame_p: 0.5,
        }
    }

    #[test]
    fn adapters_leave_backbone_untouched() {
        let mut p = DatasetPlan::uniform(8, 9);
        p.frames = 2;
        let d = build_datasets(&p).unwrap();
        let sched = NoiseSchedule::new(64, ScheduleKind::Cosine, true).unwrap();
        let mut m = model();
        let theta = m.params.checksum(Component::Theta);
        let video = m.params.checksum(Component::Video);
        let log = train_edit_adapter(&mut m, &d.edit, &sched, &quick(), &Stream::new(1)).unwrap();
        assert_eq!(m.params.checksum(Component::Theta), theta);
        assert_eq!(m.params.checksum(Component::Video), video);
        assert_eq!(log.split("train").len(), 3);
        assert_eq!(log.split("heldout").iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 2, 3]);
        let edit = m.params.checksum(Component::Edit);
        train_video_adapter(&mut m, &d.video, &sched, &quick(), &Stream::new(1)).unwrap();
        assert_eq!(m.params.checksum(Component::Theta), theta);
        assert_eq!(m.params.checksum(Component::Edit), edit);
        assert_ne!(m.params.checksum(Component::Video), video);
    }

    #[test]
    fn backbone_training_is_deterministic() {
        let d = build_datasets(&DatasetPlan::uniform(6, 4)).unwrap();
        let sched = NoiseSchedule::new(64, ScheduleKind::Cosine, true).unwrap();
        let run = || {
            let mut m = model();
            let log = pretrain_backbone(&mut m, &d.backbone, &sched, &quick(), &Stream::new(2)).unwrap();
            (m.params.checksum(Component::Theta), log.to_csv())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_adapter_is_an_error() {
        let d = build_datasets(&DatasetPlan::uniform(4, 4)).unwrap();
        let sched = NoiseSchedule::new(64, ScheduleKind::Cosine, true).unwrap();
        let mut m = Model::new(model().cfg, &Stream::new(1)).unwrap();
        assert!(train_edit_adapter(&mut m, &d.edit, &sched, &quick(), &Stream::new(1)).is_err());
    }
}
