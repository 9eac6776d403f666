//! One optimizer step over a loss built on a fresh tape, plus loss logs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Binder, Component, LoraSpec, ParamStore};
use crate::numerics::{backward, Adam, Tape, Tensor, Var};

/// Build the loss with a binder whose trainable leaves are `trainable`,
/// backpropagate and apply Adam. Returns the loss value.
pub fn step(
    params: &mut ParamStore,
    adam: &mut Adam,
    trainable: &[Component],
    lora: Option<LoraSpec>,
    iteration: usize,
    loss_fn: impl FnOnce(&Binder) -> Result<Var>,
) -> Result<f64> {
    let (loss, grads) = {
        let tape = Tape::new();
        let mut b = Binder::new(params, Some(&tape), trainable);
        if let Some(spec) = lora {
            b = b.with_lora(spec);
        }
        let loss = loss_fn(&b)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration,
                what: format!("loss is {value}"),
            });
        }
        let grads = b.grads(&backward(&loss)?);
        (value, grads)
    };
    apply(params, adam, &grads, trainable).map_err(|e| match e {
        Error::NonFiniteGradient(name) => Error::Divergence {
            iteration,
            what: format!("non-finite gradient for `{name}`"),
        },
        e => e,
    })?;
    Ok(loss)
}

/// Apply one Adam update. Any gradient for a parameter outside `trainable`
/// is a hard failure.
pub fn apply(params: &mut ParamStore, adam: &mut Adam, grads: &[(String, Tensor)], trainable: &[Component]) -> Result<()> {
    for (name, _) in grads {
        if !Component::of(name).is_some_and(|c| trainable.contains(&c)) {
            return Err(Error::FrozenGradient(name.clone()));
        }
    }
    let mut updates: Vec<(&str, &mut Tensor, &Tensor)> = Vec::with_capacity(grads.len());
    let mut gi = grads.iter().peekable();
    for (name, t) in params.iter_mut() {
        if let Some((gn, g)) = gi.peek() {
            if gn == name {
                updates.push((name.as_str(), t, g));
                gi.next();
            }
        }
    }
    adam.step(updates)
}

/// `iteration,split,loss` rows.
#[derive(Clone, Debug, Default)]
pub struct LossLog {
    pub rows: Vec<(usize, &'static str, f64)>,
}

impl LossLog {
    pub fn push(&mut self, iteration: usize, split: &'static str, loss: f64) {
        self.rows.push((iteration, split, loss));
    }

    pub fn split(&self, split: &str) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.1 == split).map(|r| (r.0, r.2)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,split,loss\n");
        for (i, split, l) in &self.rows {
            let _ = writeln!(s, "{i},{split},{l:.6}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Trailing moving average with window `w`.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;

    #[test]
    fn step_updates_only_trainable() {
        let mut p = ParamStore::new();
        p.insert("theta.a", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        p.insert("edit.a", Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap()).unwrap();
        let before = p.checksum(Component::Theta);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let loss = step(&mut p, &mut adam, &[Component::Edit], None, 0, |b| {
            Ok(b.param("theta.a")?.mul(&b.param("edit.a")?)?.sum())
        })
        .unwrap();
        assert_eq!(loss, -1.0);
        assert_eq!(p.checksum(Component::Theta), before);
        let e = p.get("edit.a").unwrap().data().to_vec();
        assert!((e[0] - 1.9).abs() < 1e-5 && (e[1] - 3.1).abs() < 1e-5);
    }

    #[test]
    fn gradient_for_frozen_name_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("theta.a", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let g = vec![("theta.a".to_string(), Tensor::scalar(1.0))];
        assert!(matches!(apply(&mut p, &mut adam, &g, &[Component::Align]), Err(Error::FrozenGradient(_))));
    }

    #[test]
    fn nan_loss_reports_iteration() {
        let mut p = ParamStore::new();
        p.insert("edit.a", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let err = step(&mut p, &mut adam, &[Component::Edit], None, 17, |b| Ok(b.param("edit.a")?.scale(f32::NAN))).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 17, .. }));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
