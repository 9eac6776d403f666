use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every `(name, param, grad)` triple. Nothing is
    /// modified if any gradient is non-finite or mis-shaped.
    pub fn step<'a>(&mut self, updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>) -> Result<()> {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, p, g) in &updates {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        for (name, p, g) in updates {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let mut data = p.to_vec();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
            *p = Tensor::raw(p.shape().to_vec(), data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        Adam::new(AdamConfig::default()).step([("w", &mut p, &g)]).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias corrected mhat = vhat = 1 -> update = lr / (1 + eps)
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step([("w", &mut p, &g)]).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn nan_gradient_rejected_with_name() {
        let mut p = Tensor::ones(&[2]);
        let g = Tensor::from_vec(&[2], vec![0.0, f32::NAN]).unwrap();
        let err = Adam::new(AdamConfig::default()).step([("enc.w", &mut p, &g)]).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(p.data(), &[1.0, 1.0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = crate::rng::Stream::new(11);
            let mut p = rng.normal_tensor(&[16]);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01));
            for _ in 0..20 {
                let g = rng.normal_tensor(&[16]);
                adam.step([("p", &mut p, &g)]).unwrap();
            }
            p
        };
        assert!(run().bit_eq(&run()));
    }
}
