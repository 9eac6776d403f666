//! Building blocks shared by every network.

use super::params::{Binder, Init};
use crate::error::{invalid, Result};
use crate::numerics::{Tensor, Var};
use crate::vocab::{self, Token};

const GN_EPS: f32 = 1e-5;

pub fn conv(b: &Binder, p: &str, x: &Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.weight(&format!("{p}.w"))?;
    let bias = b.param(&format!("{p}.b"))?;
    x.conv2d(&w, Some(&bias), stride, pad)
}

pub fn linear(b: &Binder, p: &str, x: &Var) -> Result<Var> {
    let w = b.weight(&format!("{p}.w"))?;
    let bias = b.param(&format!("{p}.b"))?;
    x.linear(&w, Some(&bias))
}

pub fn linear_nobias(b: &Binder, p: &str, x: &Var) -> Result<Var> {
    x.linear(&b.weight(&format!("{p}.w"))?, None)
}

pub fn norm(b: &Binder, p: &str, x: &Var, groups: usize) -> Result<Var> {
    x.group_norm(groups, &b.param(&format!("{p}.g"))?, &b.param(&format!("{p}.b"))?, GN_EPS)
}

pub fn init_resblock(init: &mut Init, p: &str, cin: usize, cout: usize, emb: usize) -> Result<()> {
    init.norm(&format!("{p}.n1"), cin)?;
    init.conv(&format!("{p}.c1"), cout, cin, 3)?;
    init.linear(&format!("{p}.film"), 2 * cout, emb)?;
    init.norm(&format!("{p}.n2"), cout)?;
    init.conv(&format!("{p}.c2"), cout, cout, 3)?;
    if cin != cout {
        init.conv(&format!("{p}.skip"), cout, cin, 1)?;
    }
    Ok(())
}

/// Residual block with FiLM conditioning; `cond` is the activated embedding `[N, emb]`.
pub fn resblock(b: &Binder, p: &str, x: &Var, cond: &Var, groups: usize) -> Result<Var> {
    let h = conv(b, &format!("{p}.c1"), &norm(b, &format!("{p}.n1"), x, groups)?.silu(), 1, 1)?;
    let cout = h.shape()[1];
    let n = h.shape()[0];
    let film = linear(b, &format!("{p}.film"), cond)?;
    let scale = film.narrow(1, 0, cout)?.reshape(&[n, cout, 1, 1])?;
    let shift = film.narrow(1, cout, cout)?.reshape(&[n, cout, 1, 1])?;
    let h = norm(b, &format!("{p}.n2"), &h, groups)?;
    let h = h.add(&h.mul(&scale)?)?.add(&shift)?;
    let h = conv(b, &format!("{p}.c2"), &h.silu(), 1, 1)?;
    let skip_name = format!("{p}.skip.w");
    let skip = if b.store().contains(&skip_name) {
        conv(b, &format!("{p}.skip"), x, 1, 0)?
    } else {
        x.clone()
    };
    h.add(&skip)
}

/// Sinusoidal embedding `[N, dim]` of one timestep per row.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos() as f32);
        }
    }
    Tensor::from_vec(&[ts.len(), dim], data).expect("one embedding per timestep")
}

/// Mean of the embedding-table rows of each token list: `[rows, dim]`.
pub fn token_mean(b: &Binder, table: &str, rows: &[&[Token]]) -> Result<Var> {
    let mut flat = Vec::new();
    for r in rows {
        vocab::check(r)?;
        if r.is_empty() {
            flat.push(vocab::NULL);
        } else {
            flat.extend_from_slice(r);
        }
    }
    let mut avg = vec![0.0f32; rows.len() * flat.len()];
    let mut col = 0;
    for (i, r) in rows.iter().enumerate() {
        let n = r.len().max(1);
        for _ in 0..n {
            avg[i * flat.len() + col] = 1.0 / n as f32;
            col += 1;
        }
    }
    if rows.is_empty() {
        return Err(invalid("token_mean", "no token lists"));
    }
    let m = Var::constant(Tensor::from_vec(&[rows.len(), flat.len()], avg)?);
    m.matmul(&b.param(table)?.gather(&flat)?)
}

/// Repeat each row `times` times along axis 0 (`[B, ..] -> [B * times, ..]`).
pub fn repeat_rows(x: &Var, times: usize) -> Result<Var> {
    if times == 1 {
        return Ok(x.clone());
    }
    let s = x.shape().to_vec();
    let mut expanded = vec![s[0], 1];
    expanded.extend_from_slice(&s[1..]);
    let mut target = expanded.clone();
    target[1] = times;
    let mut out = s.clone();
    out[0] *= times;
    x.reshape(&expanded)?.broadcast_to(&target)?.reshape(&out)
}
