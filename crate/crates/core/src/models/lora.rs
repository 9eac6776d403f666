//! Low-rank deltas on every backbone conv and linear weight.

use super::params::{lora_name, Init, LoraSpec, ParamStore};
use super::ModelConfig;
use crate::error::{invalid, Result};
use crate::numerics::{Tensor, Var};

/// Backbone weights that receive a LoRA delta: every conv and linear weight
/// (the caption embedding table is a lookup, not a projection).
pub fn targets(backbone: &ParamStore) -> Vec<(String, Vec<usize>)> {
    backbone
        .iter()
        .filter(|(n, t)| n.starts_with("theta.") && n.ends_with(".w") && t.rank() >= 2)
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect()
}

pub fn init_lora(cfg: &ModelConfig, backbone: &ParamStore, init: &mut Init) -> Result<()> {
    let r = cfg.lora_rank;
    for (name, shape) in targets(backbone) {
        let out = shape[0];
        let inp: usize = shape[1..].iter().product();
        init.raw(&lora_name(&name, "a"), &[r, inp], (1.0 / inp as f32).sqrt())?;
        init.zeros(&lora_name(&name, "b"), &[out, r])?;
    }
    Ok(())
}

/// `W + (alpha / r) B A`, reshaped to `W`'s shape.
pub fn effective(w: &Var, a: &Var, b: &Var, spec: LoraSpec) -> Result<Var> {
    let out = w.shape()[0];
    let inp: usize = w.shape()[1..].iter().product();
    if a.shape() != [spec.rank, inp] || b.shape() != [out, spec.rank] {
        return Err(invalid(
            "apply_lora",
            format!(
                "rank {} factors A{:?} B{:?} do not fit weight {:?}",
                spec.rank,
                a.shape(),
                b.shape(),
                w.shape()
            ),
        ));
    }
    let delta = b.matmul(a)?.scale(spec.alpha / spec.rank as f32).reshape(w.shape())?;
    w.add(&delta)
}

/// Effective weights for every adapted backbone weight; `theta` is untouched.
pub fn apply_lora(params: &ParamStore, spec: LoraSpec) -> Result<Vec<(String, Tensor)>> {
    targets(params)
        .into_iter()
        .map(|(name, _)| {
            let w = Var::constant(params.get(&name)?.clone());
            let a = Var::constant(params.get(&lora_name(&name, "a"))?.clone());
            let b = Var::constant(params.get(&lora_name(&name, "b"))?.clone());
            Ok((name, effective(&w, &a, &b, spec)?.value().clone()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(shape: &[usize], data: Vec<f32>) -> Var {
        Var::constant(Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn zero_b_leaves_weight_unchanged() {
        let w = v(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = v(&[1, 3], vec![0.3, -0.2, 0.9]);
        let b = v(&[2, 1], vec![0.0, 0.0]);
        let spec = LoraSpec { rank: 1, alpha: 1.0 };
        assert!(effective(&w, &a, &b, spec).unwrap().value().bit_eq(w.value()));
    }

    #[test]
    fn rank_one_outer_product() {
        let w = v(&[2, 2], vec![0.0; 4]);
        let a = v(&[1, 2], vec![1.0, 2.0]);
        let b = v(&[2, 1], vec![3.0, -1.0]);
        let spec = LoraSpec { rank: 1, alpha: 1.0 };
        assert_eq!(effective(&w, &a, &b, spec).unwrap().value().data(), &[3.0, 6.0, -1.0, -2.0]);
    }

    #[test]
    fn rank_mismatch_rejected() {
        let w = v(&[2, 2], vec![0.0; 4]);
        let a = v(&[2, 2], vec![0.0; 4]);
        let b = v(&[2, 2], vec![0.0; 4]);
        assert!(effective(&w, &a, &b, LoraSpec { rank: 1, alpha: 1.0 }).is_err());
    }
}
