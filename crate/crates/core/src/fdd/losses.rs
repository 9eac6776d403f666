//! Score distillation surrogate and hinge adversarial losses.

use crate::diffusion::{q_sample, vpred_to_eps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{compose_forward, Binder, Conds, ModelConfig, Variant};
use crate::numerics::{Tensor, Var};

/// Weighting `c(t)` of the distillation gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// `c(t) = 1`.
    Unit,
    /// `c(t) = 1 - alpha_bar(t) = 1 / (1 + SNR(t))`.
    Snr,
}

impl Weighting {
    pub fn at(self, t: usize, sched: &NoiseSchedule) -> f32 {
        match self {
            Weighting::Unit => 1.0,
            Weighting::Snr => (1.0 - sched.alpha_bar(t)) as f32,
        }
    }
}

/// Generator loss form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GLossForm {
    /// `-E[max(0, 1 + D(x'_0))]`.
    Paper,
    /// `-E[D(x'_0)]`.
    StandardHinge,
}

/// One noise draw for a distillation term: a timestep per clip and the noise.
#[derive(Clone, Debug)]
pub struct SdsDraw {
    pub ts: Vec<usize>,
    pub eps: Tensor,
}

/// A distillation term and the stopped residual `eps_hat - eps` it was built from.
pub struct SdsTerm {
    pub loss: Var,
    pub residual: Tensor,
    /// `c(t)` for every row.
    pub weights: Vec<f32>,
}

/// `mean(c ⊙ sg(r) ⊙ x0)`: its gradient with respect to `x0` is `c r / N`.
pub fn sds_surrogate(x0: &Var, residual: &Tensor, weights: &[f32]) -> Result<Var> {
    let n = x0.shape()[0];
    if residual.shape() != x0.shape() || weights.len() != n {
        return Err(Error::ShapeMismatch {
            op: "sds_surrogate",
            lhs: x0.shape().to_vec(),
            rhs: residual.shape().to_vec(),
        });
    }
    let per = residual.numel() / n.max(1);
    let scaled: Vec<f32> = residual.data().iter().enumerate().map(|(i, &r)| r * weights[i / per]).collect();
    let g = Var::constant(Tensor::from_vec(residual.shape(), scaled)?);
    Ok(x0.mul(&g)?.mean())
}

/// Which teacher scores the student sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Teacher {
    /// The edit teacher, each frame on its own with its input frame.
    Edit,
    /// The video teacher on whole clips with the output caption.
    Video,
}

/// Distillation term of `teacher` for the student sample `x0` `[B F, C, H, W]`.
/// The teacher binder must be frozen; its branch never reaches the tape.
pub fn sds_loss(teacher_b: &Binder, cfg: &ModelConfig, teacher: Teacher, x0: &Var, conds: &Conds, draw: &SdsDraw, sched: &NoiseSchedule, weighting: Weighting) -> Result<SdsTerm> {
    let f = conds.frames;
    let rows: Vec<usize> = draw.ts.iter().flat_map(|&t| std::iter::repeat(t).take(f)).collect();
    let xt = q_sample(&x0.stop_grad(), &rows, &Var::constant(draw.eps.clone()), sched)?;
    let v = match teacher {
        Teacher::Edit => {
            let c_out = conds.rows(conds.c_out);
            let c_ins = conds.c_instruct.map(|c| conds.rows(c));
            let per_frame = Conds {
                frames: 1,
                c_out: &c_out,
                c_instruct: c_ins.as_deref(),
                c_vid: conds.c_vid,
                first: None,
            };
            compose_forward(teacher_b, cfg, Variant::Psi, &xt, &rows, &per_frame)?
        }
        Teacher::Video => {
            let video = Conds {
                c_instruct: None,
                c_vid: None,
                ..*conds
            };
            compose_forward(teacher_b, cfg, Variant::Rho, &xt, &draw.ts, &video)?
        }
    };
    let eps_hat = vpred_to_eps(&v, &xt, &rows, sched)?;
    let residual = eps_hat.value().sub(&draw.eps)?;
    let weights: Vec<f32> = rows.iter().map(|&t| weighting.at(t, sched)).collect();
    let loss = sds_surrogate(x0, &residual, &weights)?;
    Ok(SdsTerm { loss, residual, weights })
}

/// `E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))]`.
pub fn d_hinge(real: &Var, fake: &Var) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch {
            op: "d_hinge",
            lhs: real.shape().to_vec(),
            rhs: fake.shape().to_vec(),
        });
    }
    real.neg().add_scalar(1.0).relu().mean().add(&fake.add_scalar(1.0).relu().mean())
}

pub fn g_hinge(fake: &Var, form: GLossForm) -> Var {
    match form {
        GLossForm::Paper => fake.add_scalar(1.0).relu().mean().neg(),
        GLossForm::StandardHinge => fake.mean().neg(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{backward, Tape};
    use proptest::prelude::*;

    fn scores(v: &[f32]) -> (Tape, Var) {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[v.len()], v.to_vec()).unwrap());
        (tape, x)
    }

    #[test]
    fn perfect_margins_cost_nothing() {
        let r = Var::constant(Tensor::full(&[2], 1.0));
        let f = Var::constant(Tensor::full(&[2], -1.0));
        assert_eq!(d_hinge(&r, &f).unwrap().value().item(), 0.0);
    }

    #[test]
    fn weak_real_score_pays_its_margin() {
        let r = Var::constant(Tensor::from_vec(&[1], vec![-0.5]).unwrap());
        let f = Var::constant(Tensor::from_vec(&[1], vec![-1.0]).unwrap());
        assert_eq!(d_hinge(&r, &f).unwrap().value().item(), 1.5);
    }

    #[test]
    fn paper_generator_loss_saturates_below_minus_one() {
        let (_t, f) = scores(&[-2.0]);
        let l = g_hinge(&f, GLossForm::Paper);
        assert_eq!(l.value().item(), 0.0);
        assert_eq!(backward(&l).unwrap().wrt(&f).data(), &[0.0]);
    }

    #[test]
    fn standard_generator_loss_stays_live() {
        let (_t, f) = scores(&[-2.0]);
        let l = g_hinge(&f, GLossForm::StandardHinge);
        assert_eq!(l.value().item(), 2.0);
        assert_eq!(backward(&l).unwrap().wrt(&f).data(), &[-1.0]);
    }

    #[test]
    fn mismatched_real_and_fake_rejected() {
        let r = Var::constant(Tensor::zeros(&[2]));
        let f = Var::constant(Tensor::zeros(&[3]));
        assert!(d_hinge(&r, &f).is_err());
    }

    #[test]
    fn surrogate_gradient_is_weighted_residual_over_n() {
        let tape = Tape::new();
        let x0 = tape.leaf(Tensor::full(&[2, 3], 0.7));
        let g = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let l = sds_surrogate(&x0, &g, &[1.0, 2.0]).unwrap();
        let grad = backward(&l).unwrap().wrt(&x0);
        let want = [1.0, -2.0, 0.5, 6.0, 0.0, -2.0].map(|v: f32| v / 6.0);
        for (a, b) in grad.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let tape = Tape::new();
        let x0 = tape.leaf(Tensor::full(&[1, 4], 0.3));
        let l = sds_surrogate(&x0, &Tensor::zeros(&[1, 4]), &[1.0]).unwrap();
        assert!(backward(&l).unwrap().wrt(&x0).data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn paper_generator_loss_never_positive(v in proptest::collection::vec(-5.0f32..5.0, 1..16)) {
            let f = Var::constant(Tensor::from_vec(&[v.len()], v.clone()).unwrap());
            prop_assert!(g_hinge(&f, GLossForm::Paper).value().item() <= 0.0);
        }

        #[test]
        fn discriminator_loss_never_negative(r in proptest::collection::vec(-5.0f32..5.0, 4), f in proptest::collection::vec(-5.0f32..5.0, 4)) {
            let r = Var::constant(Tensor::from_vec(&[4], r).unwrap());
            let f = Var::constant(Tensor::from_vec(&[4], f).unwrap());
            prop_assert!(d_hinge(&r, &f).unwrap().value().item() >= 0.0);
        }
    }
}
