//! Built-in invariant checks: gradients, schedules, zero-init identities,
//! hinge algebra, the distillation gradient and K-bin sampling.

use std::fmt;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::diffusion::{bin_ranges, kbin_timesteps, NoiseSchedule, ScheduleKind};
use crate::error::Result;
use crate::fdd::{d_hinge, g_hinge, sds_loss, GLossForm, SdsDraw, Teacher, Weighting};
use crate::models::compose::inference_binder;
use crate::models::{compose_forward, Binder, Component, Conds, Model, ModelConfig, Variant};
use crate::numerics::gradcheck::check_all;
use crate::numerics::{backward, Tape, Tensor, Var};
use crate::rng::Stream;
use crate::vocab::Token;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Every op of the catalog against central differences, `cases` draws each.
pub fn gradients(cases: usize, seed: u64) -> Result<Vec<Check>> {
    Ok(check_all(cases, 1e-2, seed)?
        .into_iter()
        .map(|(op, err)| Check::new(format!("gradcheck {op}"), err < 1e-3, format!("{cases} cases, max rel err {err:.2e}")))
        .collect())
}

/// Zero terminal alpha_bar and strictly decreasing SNR for both schedule kinds.
pub fn schedules(steps: &[usize]) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &t in steps {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(t, kind, true)?;
            let terminal = s.alpha_bar(t) == 0.0;
            let monotone = (1..t).all(|i| s.snr(i) > s.snr(i + 1));
            out.push(Check::new(
                format!("schedule {kind:?} T={t}"),
                terminal && monotone,
                format!("alpha_bar[T] = {}, snr strictly decreasing = {monotone}", s.alpha_bar(t)),
            ));
        }
    }
    Ok(out)
}

fn small_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        c1: 8,
        c2: 16,
        emb: 16,
        groups: 4,
        instr_dim: 4,
        ..Default::default()
    };
    let rng = Stream::new(seed);
    let mut m = Model::new(cfg, &rng)?;
    m.attach_edit(&rng)?;
    m.attach_video(&rng)?;
    m.attach_lora(&rng)?;
    Ok(m)
}

struct Inputs {
    x: Var,
    vid: Var,
    first: Var,
    c_out: Vec<Vec<Token>>,
    c_ins: Vec<Vec<Token>>,
    ts: Vec<usize>,
}

impl Inputs {
    fn draw(seed: u64, total: usize) -> Inputs {
        let mut r = Stream::new(seed).split("inputs");
        Inputs {
            x: Var::constant(r.normal_tensor(&[8, 3, 16, 16])),
            vid: Var::constant(r.normal_tensor(&[8, 3, 16, 16])),
            first: Var::constant(r.normal_tensor(&[2, 3, 16, 16])),
            c_out: vec![vec![1, 4, 16, 12, 20], vec![2, 6, 17, 10, 18]],
            c_ins: vec![vec![45, 6], vec![42]],
            ts: vec![r.range(1, total), r.range(1, total)],
        }
    }

    fn conds(&self) -> Conds<'_> {
        Conds {
            frames: 4,
            c_out: &self.c_out,
            c_instruct: Some(&self.c_ins),
            c_vid: Some(&self.vid),
            first: Some(&self.first),
        }
    }
}

/// psi == backbone, rho == backbone, phi == eta with freshly attached adapters.
pub fn zero_init(seeds: u64) -> Result<Vec<Check>> {
    let m = small_model(11)?;
    let run = |v: Variant, inp: &Inputs| -> Result<Tensor> {
        let b = inference_binder(&m, v);
        Ok(compose_forward(&b, &m.cfg, v, &inp.x, &inp.ts, &inp.conds())?.value().clone())
    };
    let mut ok = [true; 3];
    for seed in 0..seeds {
        let inp = Inputs::draw(seed, 64);
        let base = run(Variant::Backbone, &inp)?;
        ok[0] &= run(Variant::Psi, &inp)?.bit_eq(&base);
        ok[1] &= run(Variant::Rho, &inp)?.bit_eq(&base);
        ok[2] &= run(Variant::Phi, &inp)?.bit_eq(&run(Variant::Eta, &inp)?);
    }
    Ok(["psi == backbone", "rho == per-frame backbone", "phi == eta"]
        .iter()
        .zip(ok)
        .map(|(name, pass)| Check::new(format!("zero-init {name}"), pass, format!("bit-exact over {seeds} inputs")))
        .collect())
}

fn scores(tape: &Tape, v: &[f32]) -> Result<Var> {
    Ok(tape.leaf(Tensor::from_vec(&[v.len()], v.to_vec())?))
}

/// The worked hinge examples plus saturation of the paper generator loss.
pub fn hinge(seed: u64) -> Result<Vec<Check>> {
    let c = |v: &[f32]| Tensor::from_vec(&[v.len()], v.to_vec()).map(Var::constant);
    let mut out = Vec::new();
    let l = d_hinge(&c(&[1.0])?, &c(&[-1.0])?)?.value().item();
    out.push(Check::new("hinge D at perfect margins", l == 0.0, format!("L_D = {l}")));
    let l = d_hinge(&c(&[-0.5])?, &c(&[-1.0])?)?.value().item();
    out.push(Check::new("hinge D weak real score", l == 1.5, format!("L_D = {l}")));

    let tape = Tape::new();
    let f = scores(&tape, &[-2.0])?;
    let l = g_hinge(&f, GLossForm::Paper);
    let g = backward(&l)?.wrt(&f).item();
    out.push(Check::new("hinge G paper saturates", l.value().item() == 0.0, format!("L_G = {}", l.value().item())));
    out.push(Check::new("hinge G paper gradient", g == 0.0, format!("dL/dD = {g}")));
    let tape = Tape::new();
    let f = scores(&tape, &[-2.0])?;
    let l = g_hinge(&f, GLossForm::StandardHinge);
    let g = backward(&l)?.wrt(&f).item();
    out.push(Check::new("hinge G standard value", l.value().item() == 2.0, format!("L_G = {}", l.value().item())));
    out.push(Check::new("hinge G standard gradient", g == -1.0, format!("dL/dD = {g}")));

    let mut r = Stream::new(seed).split("hinge");
    let (mut nonpos, mut dead) = (true, true);
    for _ in 0..1000 {
        let v: Vec<f32> = (0..8).map(|_| r.normal() * 3.0).collect();
        let tape = Tape::new();
        let f = scores(&tape, &v)?;
        let l = g_hinge(&f, GLossForm::Paper);
        nonpos &= l.value().item() <= 0.0;
        let g = backward(&l)?.wrt(&f);
        dead &= v.iter().zip(g.data()).all(|(&d, &gd)| d >= -1.0 || gd == 0.0);
    }
    out.push(Check::new("hinge G paper never positive", nonpos, "1000 random score vectors"));
    out.push(Check::new("hinge G paper zero gradient below -1", dead, "1000 random score vectors"));
    Ok(out)
}

/// A trained-looking teacher: adapters perturbed away from their zero init.
fn perturbed_teacher(seed: u64) -> Result<Model> {
    let mut m = small_model(seed)?;
    let mut r = Stream::new(seed).split("perturb");
    for (name, t) in m.params.iter_mut() {
        if matches!(Component::of(name), Some(Component::Edit | Component::Video)) {
            let noise = r.normal_tensor(t.shape()).scale(0.05);
            *t = t.add(&noise)?;
        }
    }
    Ok(m)
}

/// Oracle residual: `eps_hat - eps` from the teacher's v prediction on a
/// hand-built noisy input.
fn oracle_residual(teacher: &Model, which: Teacher, x0: &Tensor, inp: &Inputs, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let per = x0.numel() / x0.shape()[0];
    let rows: Vec<usize> = inp.ts.iter().flat_map(|&t| [t; 4]).collect();
    let coef = |i: usize| {
        let a = sched.alpha_bar(rows[i / per]);
        (a.sqrt() as f32, (1.0 - a).sqrt() as f32)
    };
    let xt: Vec<f32> = (0..x0.numel()).map(|i| {
        let (sa, sb) = coef(i);
        sa * x0.data()[i] + sb * eps.data()[i]
    }).collect();
    let xt = Var::constant(Tensor::from_vec(x0.shape(), xt)?);
    let b = Binder::frozen(&teacher.params);
    let v = match which {
        Teacher::Edit => {
            let c_out: Vec<Vec<Token>> = rows.iter().enumerate().map(|(i, _)| inp.c_out[i / 4].clone()).collect();
            let c_ins: Vec<Vec<Token>> = rows.iter().enumerate().map(|(i, _)| inp.c_ins[i / 4].clone()).collect();
            let conds = Conds {
                frames: 1,
                c_out: &c_out,
                c_instruct: Some(&c_ins),
                c_vid: Some(&inp.vid),
                first: None,
            };
            compose_forward(&b, &teacher.cfg, Variant::Psi, &xt, &rows, &conds)?
        }
        Teacher::Video => {
            let conds = Conds {
                c_instruct: None,
                c_vid: None,
                ..inp.conds()
            };
            compose_forward(&b, &teacher.cfg, Variant::Rho, &xt, &inp.ts, &conds)?
        }
    };
    let (v, xt) = (v.value(), xt.value());
    let r: Vec<f32> = (0..x0.numel()).map(|i| {
        let (sa, sb) = coef(i);
        sa * v.data()[i] + sb * xt.data()[i] - eps.data()[i]
    }).collect();
    Tensor::from_vec(x0.shape(), r)
}

/// `dL/dx0 == c(t) (eps_hat - eps) / N` for both teachers.
pub fn sds_identity(seeds: u64, steps: usize) -> Result<Vec<Check>> {
    let sched = NoiseSchedule::new(steps, ScheduleKind::Linear, true)?;
    let teacher = perturbed_teacher(21)?;
    let mut out = Vec::new();
    for which in [Teacher::Edit, Teacher::Video] {
        let mut worst = 0.0f32;
        for seed in 0..seeds {
            let inp = Inputs::draw(seed, steps);
            let mut r = Stream::new(seed).split("sds");
            let x0v = r.normal_tensor(&[8, 3, 16, 16]);
            let eps = r.normal_tensor(&[8, 3, 16, 16]);
            let tape = Tape::new();
            let x0 = tape.leaf(x0v.clone());
            let draw = SdsDraw {
                ts: inp.ts.clone(),
                eps: eps.clone(),
            };
            let term = sds_loss(&Binder::frozen(&teacher.params), &teacher.cfg, which, &x0, &inp.conds(), &draw, &sched, Weighting::Snr)?;
            let grad = backward(&term.loss)?.wrt(&x0);
            let res = oracle_residual(&teacher, which, &x0v, &inp, &eps, &sched)?;
            let n = x0v.numel() as f32;
            let per = x0v.numel() / 8;
            for (i, (&g, &rv)) in grad.data().iter().zip(res.data()).enumerate() {
                let c = (1.0 - sched.alpha_bar(inp.ts[i / per / 4])) as f32;
                worst = worst.max((g - c * rv / n).abs());
            }
        }
        out.push(Check::new(
            format!("sds gradient identity {which:?}"),
            worst < 1e-6,
            format!("{seeds} draws, max abs err {worst:.2e}"),
        ));
    }
    Ok(out)
}

/// Bin membership, descending order and per-bin uniformity (chi-square).
pub fn kbin(draws: usize, k: usize, total: usize, seed: u64) -> Result<Vec<Check>> {
    let ranges = bin_ranges(k, total)?;
    let mut counts: Vec<Vec<u64>> = ranges.iter().map(|&(lo, hi)| vec![0; hi - lo + 1]).collect();
    let mut valid = true;
    let mut r = Stream::new(seed).split("kbin");
    for _ in 0..draws {
        let d = kbin_timesteps(k, total, &mut r)?;
        valid &= d.is_valid(total);
        for (b, &t) in d.steps.iter().enumerate() {
            let (lo, hi) = ranges[b];
            if (lo..=hi).contains(&t) {
                counts[b][t - lo] += 1;
            }
        }
    }
    let mut out = vec![Check::new(
        format!("kbin membership and order k={k} T={total}"),
        valid,
        format!("{draws} draws"),
    )];
    for (b, c) in counts.iter().enumerate() {
        let p = if c.len() < 2 {
            1.0
        } else {
            let e = draws as f64 / c.len() as f64;
            let stat: f64 = c.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
            let dist = ChiSquared::new((c.len() - 1) as f64).map_err(|e| crate::error::invalid("kbin", e.to_string()))?;
            1.0 - dist.cdf(stat)
        };
        out.push(Check::new(format!("kbin uniform within bin {b}"), p > 0.01, format!("chi-square p = {p:.3}")));
    }
    Ok(out)
}

/// The full battery, as run by `fddlab selftest`.
pub fn run_all(grad_cases: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    out.extend(zero_init(3)?);
    out.extend(gradients(grad_cases, 7)?);
    out.extend(schedules(&[8, 128, 1000])?);
    out.extend(hinge(3)?);
    out.extend(sds_identity(2, 64)?);
    out.extend(kbin(10_000, 3, 64, 5)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass() {
        let mut all = schedules(&[8, 128]).unwrap();
        all.extend(hinge(1).unwrap());
        all.extend(zero_init(1).unwrap());
        all.extend(kbin(2000, 3, 64, 1).unwrap());
        for c in &all {
            assert!(c.pass, "{c}");
        }
    }

    #[test]
    fn distillation_gradient_matches_oracle() {
        for c in sds_identity(1, 16).unwrap() {
            assert!(c.pass, "{c}");
        }
    }

    #[test]
    fn display_marks_failures() {
        assert_eq!(Check::new("x", false, "y").to_string(), "FAIL x: y");
    }
}
