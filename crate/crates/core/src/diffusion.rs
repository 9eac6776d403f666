//! Noise schedules, forward noising, v/eps conversions, deterministic DDIM
//! sampling and K-bin timestep selection.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! noisiest. `alpha_bar(0)` is defined as 1 (clean data).

use crate::error::{invalid, Result};
use crate::numerics::{Tensor, Var};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            _ => Err(format!("unknown schedule kind `{s}` (linear|cosine)")),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    zero_terminal: bool,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, zero_terminal: bool) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("make_schedule", format!("need at least 2 steps, got {steps}")));
        }
        let mut alpha_bar = match kind {
            ScheduleKind::Linear => {
                // The classic 1e-4..0.02 range over 1000 steps, rescaled to `steps`.
                let scale = 1000.0 / steps as f64;
                let (b0, b1) = (1e-4 * scale, (0.02 * scale).min(0.999));
                let mut acc = 1.0;
                (0..steps)
                    .map(|i| {
                        let b = b0 + (b1 - b0) * i as f64 / (steps - 1) as f64;
                        acc *= 1.0 - b;
                        acc
                    })
                    .collect::<Vec<_>>()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| (((t / steps as f64) + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                let mut prev = 1.0;
                (1..=steps)
                    .map(|t| {
                        let ab = f(t as f64) / f0;
                        let beta = (1.0 - ab / prev).min(0.999);
                        prev *= 1.0 - beta;
                        prev
                    })
                    .collect()
            }
        };
        if zero_terminal {
            let mut s: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
            let (first, last) = (s[0], s[steps - 1]);
            for v in &mut s {
                *v = (*v - last) * first / (first - last);
            }
            alpha_bar = s.iter().map(|v| v * v).collect();
            alpha_bar[steps - 1] = 0.0;
        }
        let mut prev = 1.0;
        let beta = alpha_bar
            .iter()
            .map(|&a| {
                let b = 1.0 - a / prev;
                prev = a;
                b
            })
            .collect();
        Ok(Self {
            kind,
            zero_terminal,
            beta,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn zero_terminal(&self) -> bool {
        self.zero_terminal
    }

    /// Cumulative signal fraction at step `t` (`t = 0` gives 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid("timestep", format!("t={t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `[alpha_bar; beta]` as a `[2, T]` tensor, for checkpoints.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.alpha_bar.iter().chain(&self.beta).map(|&x| x as f32).collect();
        Tensor::from_vec(&[2, self.steps()], data).expect("two rows of T")
    }
}

/// Per-sample coefficients as a `[n, 1, ..]` tensor matching `rank`.
fn coef(ts: &[usize], rank: usize, f: impl Fn(usize) -> f64) -> Var {
    let mut shape = vec![1; rank.max(1)];
    shape[0] = ts.len();
    Var::constant(Tensor::from_vec(&shape, ts.iter().map(|&t| f(t) as f32).collect()).expect("one coefficient per sample"))
}

fn check_batch(op: &'static str, x: &Var, ts: &[usize], sched: &NoiseSchedule) -> Result<()> {
    if x.shape().is_empty() || (ts.len() != 1 && ts.len() != x.shape()[0]) {
        return Err(invalid(op, format!("{} timesteps for batch shape {:?}", ts.len(), x.shape())));
    }
    ts.iter().try_for_each(|&t| sched.check_step(t))
}

/// `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`, with one timestep per leading index
/// (or one shared timestep).
pub fn q_sample(x0: &Var, ts: &[usize], eps: &Var, sched: &NoiseSchedule) -> Result<Var> {
    check_batch("q_sample", x0, ts, sched)?;
    let r = x0.shape().len();
    let a = coef(ts, r, |t| sched.alpha_bar(t).sqrt());
    let s = coef(ts, r, |t| (1.0 - sched.alpha_bar(t)).sqrt());
    if eps.shape() != x0.shape() {
        return Err(crate::Error::ShapeMismatch {
            op: "q_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    x0.mul(&a)?.add(&eps.mul(&s)?)
}

/// Training target for a v-predicting network: `sqrt(ab) eps - sqrt(1 - ab) x0`.
pub fn v_target(x0: &Var, ts: &[usize], eps: &Var, sched: &NoiseSchedule) -> Result<Var> {
    check_batch("v_target", x0, ts, sched)?;
    let r = x0.shape().len();
    let a = coef(ts, r, |t| sched.alpha_bar(t).sqrt());
    let s = coef(ts, r, |t| (1.0 - sched.alpha_bar(t)).sqrt());
    eps.mul(&a)?.sub(&x0.mul(&s)?)
}

/// `eps = sqrt(ab) v + sqrt(1 - ab) x_t`.
pub fn vpred_to_eps(v: &Var, x_t: &Var, ts: &[usize], sched: &NoiseSchedule) -> Result<Var> {
    check_batch("vpred_to_eps", v, ts, sched)?;
    let r = v.shape().len();
    let a = coef(ts, r, |t| sched.alpha_bar(t).sqrt());
    let s = coef(ts, r, |t| (1.0 - sched.alpha_bar(t)).sqrt());
    v.mul(&a)?.add(&x_t.mul(&s)?)
}

/// `x0 = sqrt(ab) x_t - sqrt(1 - ab) v`; well defined at every step.
pub fn vpred_to_x0(v: &Var, x_t: &Var, ts: &[usize], sched: &NoiseSchedule) -> Result<Var> {
    check_batch("vpred_to_x0", v, ts, sched)?;
    let r = v.shape().len();
    let a = coef(ts, r, |t| sched.alpha_bar(t).sqrt());
    let s = coef(ts, r, |t| (1.0 - sched.alpha_bar(t)).sqrt());
    x_t.mul(&a)?.sub(&v.mul(&s)?)
}

/// `x0 = (x_t - sqrt(1 - ab) eps) / sqrt(ab)`. Where `ab == 0` (zero-terminal
/// `t = T`) the quotient is undefined and the v-parameterized `x0 = -v` is
/// returned instead, which requires `v`.
pub fn eps_to_x0(eps: &Var, x_t: &Var, ts: &[usize], sched: &NoiseSchedule, v: Option<&Var>) -> Result<Var> {
    check_batch("eps_to_x0", eps, ts, sched)?;
    if ts.iter().any(|&t| sched.alpha_bar(t) == 0.0) {
        let v = v.ok_or_else(|| invalid("eps_to_x0", "alpha_bar = 0 needs the v prediction"))?;
        return vpred_to_x0(v, x_t, ts, sched);
    }
    let r = eps.shape().len();
    let inv = coef(ts, r, |t| 1.0 / sched.alpha_bar(t).sqrt());
    let s = coef(ts, r, |t| (1.0 - sched.alpha_bar(t)).sqrt());
    x_t.sub(&eps.mul(&s)?)?.mul(&inv)
}

fn check_descending(steps: &[usize], sched: &NoiseSchedule) -> Result<()> {
    if steps.is_empty() {
        return Err(invalid("ddim", "no timesteps"));
    }
    steps.iter().try_for_each(|&t| sched.check_step(t))?;
    if steps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(invalid("ddim", format!("timesteps must be strictly descending: {steps:?}")));
    }
    Ok(())
}

/// Deterministic (eta = 0) DDIM from `noise` through `steps`. `model(x_t, t)`
/// returns a v-prediction. If the model output is on a tape, so is the result.
pub fn ddim_from_noise<F>(mut model: F, noise: Var, steps: &[usize], sched: &NoiseSchedule) -> Result<Var>
where
    F: FnMut(&Var, usize) -> Result<Var>,
{
    check_descending(steps, sched)?;
    let mut x = noise;
    for (i, &t) in steps.iter().enumerate() {
        let v = model(&x, t)?;
        let x0 = vpred_to_x0(&v, &x, &[t], sched)?;
        let Some(&next) = steps.get(i + 1) else {
            return Ok(x0);
        };
        let eps = vpred_to_eps(&v, &x, &[t], sched)?;
        let ab = sched.alpha_bar(next);
        x = x0.scale(ab.sqrt() as f32).add(&eps.scale((1.0 - ab).sqrt() as f32))?;
    }
    unreachable!("loop returns on the last step")
}

/// DDIM starting from fresh standard-normal noise of `shape`.
pub fn ddim_sample<F>(model: F, shape: &[usize], steps: &[usize], sched: &NoiseSchedule, rng: &mut Stream) -> Result<Var>
where
    F: FnMut(&Var, usize) -> Result<Var>,
{
    let noise = Var::constant(rng.normal_tensor(shape));
    ddim_from_noise(model, noise, steps, sched)
}

/// `n` evenly spaced descending steps from `T`, e.g. T=64, n=16 gives 64, 60, .., 4.
pub fn uniform_steps(n: usize, total: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(invalid("uniform_steps", format!("need 1 <= n <= T, got n={n}, T={total}")));
    }
    Ok((0..n).map(|i| (total * (n - i)).div_ceil(n)).collect())
}

/// Student timesteps drawn one per bin.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepDraw {
    pub k: usize,
    /// Strictly descending.
    pub steps: Vec<usize>,
    /// Bin of each step (0 = noisiest bin).
    pub bins: Vec<usize>,
}

/// Inclusive `(lo, hi)` ranges of `k` even bins over `1..=T`, noisiest bin
/// first. Remainder steps go to the earliest bins.
pub fn bin_ranges(k: usize, total: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || k > total {
        return Err(invalid("kbin_timesteps", format!("need 1 <= k <= T, got k={k}, T={total}")));
    }
    let (base, rem) = (total / k, total % k);
    let mut hi = total;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let r = (hi + 1 - len, hi);
            hi -= len;
            r
        })
        .collect())
}

/// One uniform draw from each of `k` bins, returned descending.
pub fn kbin_timesteps(k: usize, total: usize, rng: &mut Stream) -> Result<TimestepDraw> {
    let ranges = bin_ranges(k, total)?;
    let steps = ranges.iter().map(|&(lo, hi)| rng.range(lo, hi)).collect();
    Ok(TimestepDraw {
        k,
        steps,
        bins: (0..k).collect(),
    })
}

impl TimestepDraw {
    /// Fixed draw used when K-bin sampling is disabled.
    pub fn fixed(k: usize, total: usize) -> Result<Self> {
        bin_ranges(k, total)?;
        Ok(Self {
            k,
            steps: uniform_steps(k, total)?,
            bins: (0..k).collect(),
        })
    }

    /// Whether every step lies in its bin and the sequence descends.
    pub fn is_valid(&self, total: usize) -> bool {
        let Ok(ranges) = bin_ranges(self.k, total) else {
            return false;
        };
        self.steps.len() == self.k
            && self.steps.windows(2).all(|w| w[0] > w[1])
            && self.steps.iter().zip(&ranges).all(|(&t, &(lo, hi))| lo <= t && t <= hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference rescale written independently of `NoiseSchedule::new`.
    fn reference_sqrt_ab1(total: usize) -> f64 {
        let scale = 1000.0 / total as f64;
        let b0 = 1e-4 * scale;
        1.0 - b0
    }

    #[test]
    fn zero_terminal_is_exact() {
        for t in [2, 8, 64, 128, 1000] {
            for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
                let s = NoiseSchedule::new(t, kind, true).unwrap();
                assert_eq!(s.alpha_bar(t), 0.0);
                assert_eq!(s.beta(t), 1.0);
            }
        }
    }

    #[test]
    fn rescale_preserves_first_step() {
        let s = NoiseSchedule::new(128, ScheduleKind::Linear, true).unwrap();
        let want = reference_sqrt_ab1(128).sqrt();
        assert!((s.alpha_bar(1).sqrt() - want).abs() < 1e-6);
    }

    #[test]
    fn small_linear_schedule_is_decreasing_in_unit_interval() {
        let s = NoiseSchedule::new(4, ScheduleKind::Linear, false).unwrap();
        for t in 1..=4 {
            let a = s.alpha_bar(t);
            assert!(a > 0.0 && a < 1.0);
            if t > 1 {
                assert!(a < s.alpha_bar(t - 1));
            }
        }
        assert!(NoiseSchedule::new(1, ScheduleKind::Linear, false).is_err());
    }

    #[test]
    fn q_sample_edge_cases() {
        let s = NoiseSchedule::new(16, ScheduleKind::Linear, true).unwrap();
        let mut rng = Stream::new(1);
        let x0 = Var::constant(rng.normal_tensor(&[2, 3]));
        let eps = Var::constant(rng.normal_tensor(&[2, 3]));
        let xt = q_sample(&x0, &[16], &eps, &s).unwrap();
        assert!(xt.value().bit_eq(eps.value()) || xt.value() == eps.value());
        let zero = Var::constant(Tensor::zeros(&[2, 3]));
        let xt = q_sample(&zero, &[5], &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(5)).sqrt() as f32;
        assert_eq!(xt.value(), &eps.value().scale(k));
        assert!(q_sample(&x0, &[17], &eps, &s).is_err());
        assert!(q_sample(&x0, &[0], &eps, &s).is_err());
    }

    #[test]
    fn eps_round_trip_recovers_x0() {
        let s = NoiseSchedule::new(64, ScheduleKind::Linear, true).unwrap();
        let mut rng = Stream::new(4);
        let x0 = Var::constant(rng.normal_tensor(&[3, 5]));
        let eps = Var::constant(rng.normal_tensor(&[3, 5]));
        for t in [1, 10, 40, 60] {
            let xt = q_sample(&x0, &[t], &eps, &s).unwrap();
            let back = eps_to_x0(&eps, &xt, &[t], &s, None).unwrap();
            for (a, b) in back.value().data().iter().zip(x0.value().data()) {
                assert!((a - b).abs() < 1e-5 * (1.0 / s.alpha_bar(t).sqrt()) as f32, "t={t}");
            }
        }
    }

    #[test]
    fn terminal_step_uses_v_prediction() {
        let s = NoiseSchedule::new(8, ScheduleKind::Linear, true).unwrap();
        let mut rng = Stream::new(9);
        let v = Var::constant(rng.normal_tensor(&[4]));
        let xt = Var::constant(rng.normal_tensor(&[4]));
        assert!(eps_to_x0(&v, &xt, &[8], &s, None).is_err());
        let x0 = eps_to_x0(&v, &xt, &[8], &s, Some(&v)).unwrap();
        assert!(x0.value().all_finite());
        assert_eq!(x0.value(), &v.value().scale(-1.0));
    }

    #[test]
    fn kbin_bins_for_six_steps() {
        assert_eq!(bin_ranges(3, 6).unwrap(), vec![(5, 6), (3, 4), (1, 2)]);
        let ok = TimestepDraw {
            k: 3,
            steps: vec![5, 3, 1],
            bins: vec![0, 1, 2],
        };
        assert!(ok.is_valid(6));
        let bad = TimestepDraw {
            steps: vec![5, 5, 1],
            ..ok
        };
        assert!(!bad.is_valid(6));
        assert!(kbin_timesteps(7, 6, &mut Stream::new(0)).is_err());
    }

    #[test]
    fn kbin_with_k_equal_t_is_full_sequence() {
        let d = kbin_timesteps(5, 5, &mut Stream::new(3)).unwrap();
        assert_eq!(d.steps, vec![5, 4, 3, 2, 1]);
    }

    #[test]
    fn remainder_goes_to_noisiest_bins() {
        assert_eq!(bin_ranges(3, 8).unwrap(), vec![(6, 8), (3, 5), (1, 2)]);
        assert_eq!(uniform_steps(3, 64).unwrap(), vec![64, 43, 22]);
    }

    #[test]
    fn ddim_single_terminal_step_returns_x0_prediction() {
        let s = NoiseSchedule::new(8, ScheduleKind::Linear, true).unwrap();
        let mut rng = Stream::new(2);
        let v_const = rng.normal_tensor(&[2, 2]);
        let vc = v_const.clone();
        let out = ddim_sample(move |_, _| Ok(Var::constant(vc.clone())), &[2, 2], &[8], &s, &mut rng).unwrap();
        assert_eq!(out.value(), &v_const.scale(-1.0));
        assert!(ddim_sample(|x, _| Ok(x.clone()), &[2], &[3, 5], &s, &mut rng).is_err());
    }
}
