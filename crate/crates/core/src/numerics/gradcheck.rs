//! Finite-difference gradient checking.
//!
//! The probe loss is `sum(f(x) * r)` for a fixed random `r`, evaluated in
//! f64 on the finite-difference side so the check exercises the whole
//! Jacobian, not only its column sums.

use super::tape::{backward, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::Stream;

pub type OpFn = Box<dyn Fn(&[Var]) -> Result<Var>>;

/// Worst error observed for one check.
#[derive(Clone, Copy, Debug)]
pub struct CheckResult {
    /// `|fd - analytic| / max(1, |analytic|)`
    pub max_rel_err: f64,
    pub coords: usize,
}

fn probe(out: &Tensor, r: &[f32]) -> f64 {
    out.data().iter().zip(r).map(|(&y, &w)| y as f64 * w as f64).sum()
}

/// Compare autodiff and central differences (step `h`) for every input coordinate.
pub fn check(f: &dyn Fn(&[Var]) -> Result<Var>, inputs: &[Tensor], h: f32, rng: &mut Stream) -> Result<CheckResult> {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&leaves)?;
    let r = rng.normal_tensor(out.shape());
    let loss = out.mul(&Var::constant(r.clone()))?.sum();
    let grads = backward(&loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let vars: Vec<Var> = xs.iter().cloned().map(Var::constant).collect();
        Ok(probe(f(&vars)?.value(), r.data()))
    };

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&leaves[i]);
        for j in 0..x.numel() {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[j] += h;
            minus[j] -= h;
            let step = plus[j] as f64 - minus[j] as f64;
            let mut xs = inputs.to_vec();
            xs[i] = Tensor::from_vec(x.shape(), plus)?;
            let lp = eval(&xs)?;
            xs[i] = Tensor::from_vec(x.shape(), minus)?;
            let lm = eval(&xs)?;
            let fd = (lp - lm) / step;
            let an = analytic.data()[j] as f64;
            worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            coords += 1;
        }
    }
    Ok(CheckResult {
        max_rel_err: worst,
        coords,
    })
}

/// One differentiable op with a generator of random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut Stream) -> Vec<Tensor>,
    pub f: fn() -> OpFn,
}

fn away_from_zero(mut t: Tensor) -> Tensor {
    t = t.map(|x| if x.abs() < 0.05 { x.signum() * 0.05 + x } else { x });
    t
}

fn normal(rng: &mut Stream, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape)
}

/// Every differentiable op in the engine, with representative shapes.
pub fn op_catalog() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add_broadcast",
            inputs: |r| vec![normal(r, &[2, 3, 4]), normal(r, &[3, 1])],
            f: || Box::new(|v| v[0].add(&v[1])),
        },
        OpCase {
            name: "sub",
            inputs: |r| vec![normal(r, &[3, 4]), normal(r, &[3, 4])],
            f: || Box::new(|v| v[0].sub(&v[1])),
        },
        OpCase {
            name: "mul_broadcast",
            inputs: |r| vec![normal(r, &[2, 3, 2, 2]), normal(r, &[2, 3, 1, 1])],
            f: || Box::new(|v| v[0].mul(&v[1])),
        },
        OpCase {
            name: "scale",
            inputs: |r| vec![normal(r, &[5])],
            f: || Box::new(|v| Ok(v[0].scale(-1.7))),
        },
        OpCase {
            name: "add_scalar",
            inputs: |r| vec![normal(r, &[5])],
            f: || Box::new(|v| Ok(v[0].add_scalar(0.3))),
        },
        OpCase {
            name: "silu",
            inputs: |r| vec![normal(r, &[8])],
            f: || Box::new(|v| Ok(v[0].silu())),
        },
        OpCase {
            name: "relu",
            inputs: |r| vec![away_from_zero(normal(r, &[8]))],
            f: || Box::new(|v| Ok(v[0].relu())),
        },
        OpCase {
            name: "square",
            inputs: |r| vec![normal(r, &[6])],
            f: || Box::new(|v| Ok(v[0].square())),
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![normal(r, &[3, 3])],
            f: || Box::new(|v| Ok(v[0].sum())),
        },
        OpCase {
            name: "mean",
            inputs: |r| vec![normal(r, &[3, 3])],
            f: || Box::new(|v| Ok(v[0].mean())),
        },
        OpCase {
            name: "sum_axis",
            inputs: |r| vec![normal(r, &[2, 3, 4])],
            f: || Box::new(|v| v[0].sum_axis(1, false)),
        },
        OpCase {
            name: "mean_axis",
            inputs: |r| vec![normal(r, &[2, 3, 4])],
            f: || Box::new(|v| v[0].mean_axis(2, true)),
        },
        OpCase {
            name: "reshape",
            inputs: |r| vec![normal(r, &[2, 6])],
            f: || Box::new(|v| v[0].reshape(&[3, 4])),
        },
        OpCase {
            name: "permute",
            inputs: |r| vec![normal(r, &[2, 3, 4])],
            f: || Box::new(|v| v[0].permute(&[2, 0, 1])),
        },
        OpCase {
            name: "broadcast_to",
            inputs: |r| vec![normal(r, &[2, 1, 3])],
            f: || Box::new(|v| v[0].broadcast_to(&[2, 4, 3])),
        },
        OpCase {
            name: "narrow",
            inputs: |r| vec![normal(r, &[3, 5])],
            f: || Box::new(|v| v[0].narrow(1, 1, 3)),
        },
        OpCase {
            name: "concat",
            inputs: |r| vec![normal(r, &[2, 2, 3]), normal(r, &[2, 1, 3])],
            f: || Box::new(|v| Var::concat(&[v[0].clone(), v[1].clone()], 1)),
        },
        OpCase {
            name: "softmax",
            inputs: |r| vec![normal(r, &[2, 4, 3])],
            f: || Box::new(|v| v[0].softmax(1)),
        },
        OpCase {
            name: "matmul",
            inputs: |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2])],
            f: || Box::new(|v| v[0].matmul(&v[1])),
        },
        OpCase {
            name: "bmm",
            inputs: |r| vec![normal(r, &[2, 3, 4]), normal(r, &[2, 4, 2])],
            f: || Box::new(|v| v[0].bmm(&v[1])),
        },
        OpCase {
            name: "bmm_t",
            inputs: |r| vec![normal(r, &[2, 3, 4]), normal(r, &[2, 2, 4])],
            f: || Box::new(|v| v[0].bmm_t(&v[1])),
        },
        OpCase {
            name: "linear",
            inputs: |r| vec![normal(r, &[2, 3, 4]), normal(r, &[5, 4]), normal(r, &[5])],
            f: || Box::new(|v| v[0].linear(&v[1], Some(&v[2]))),
        },
        OpCase {
            name: "gather",
            inputs: |r| vec![normal(r, &[5, 3])],
            f: || Box::new(|v| v[0].gather(&[4, 0, 4, 2])),
        },
        OpCase {
            name: "conv2d_3x3",
            inputs: |r| vec![normal(r, &[2, 2, 5, 5]), normal(r, &[3, 2, 3, 3]).scale(0.5)],
            f: || Box::new(|v| v[0].conv2d(&v[1], None, 1, 1)),
        },
        OpCase {
            name: "conv2d_stride2_bias",
            inputs: |r| vec![normal(r, &[1, 2, 6, 6]), normal(r, &[2, 2, 3, 3]).scale(0.5), normal(r, &[2])],
            f: || Box::new(|v| v[0].conv2d(&v[1], Some(&v[2]), 2, 1)),
        },
        OpCase {
            name: "conv2d_1x1",
            inputs: |r| vec![normal(r, &[2, 3, 3, 3]), normal(r, &[2, 3, 1, 1])],
            f: || Box::new(|v| v[0].conv2d(&v[1], None, 1, 0)),
        },
        OpCase {
            name: "upsample2x",
            inputs: |r| vec![normal(r, &[1, 2, 3, 3])],
            f: || Box::new(|v| v[0].upsample2x()),
        },
        OpCase {
            name: "avg_pool2x",
            inputs: |r| vec![normal(r, &[1, 2, 4, 4])],
            f: || Box::new(|v| v[0].avg_pool2x()),
        },
        OpCase {
            name: "group_norm",
            inputs: |r| vec![normal(r, &[2, 4, 3, 3]), normal(r, &[4]), normal(r, &[4])],
            f: || Box::new(|v| v[0].group_norm(2, &v[1], &v[2], 1e-5)),
        },
        OpCase {
            name: "mlp_2layer",
            inputs: |r| {
                vec![
                    normal(r, &[3, 4]),
                    normal(r, &[6, 4]).scale(0.5),
                    normal(r, &[6]),
                    normal(r, &[2, 6]).scale(0.5),
                    normal(r, &[2]),
                ]
            },
            f: || Box::new(|v| v[0].linear(&v[1], Some(&v[2]))?.silu().linear(&v[3], Some(&v[4]))),
        },
    ]
}

/// Run `cases` random checks for every op; returns `(name, worst error)`.
pub fn check_all(cases: usize, h: f32, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let root = Stream::new(seed);
    let mut report = Vec::new();
    for op in op_catalog() {
        let f = (op.f)();
        let mut worst = 0.0f64;
        for c in 0..cases {
            let mut rng = root.split(op.name).split_index(c as u64);
            let inputs = (op.inputs)(&mut rng);
            worst = worst.max(check(f.as_ref(), &inputs, h, &mut rng)?.max_rel_err);
        }
        report.push((op.name, worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_cases() {
        for (name, err) in check_all(3, 1e-3, 5).unwrap() {
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // stop_grad hides the true derivative from autodiff, so the check must fail.
        let f = |v: &[Var]| -> Result<Var> { v[0].stop_grad().mul(&v[0]) };
        let mut rng = Stream::new(2);
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, -1.5]).unwrap();
        assert!(check(&f, &[x], 1e-3, &mut rng).unwrap().max_rel_err > 0.1);
    }
}
