//! Differentiable operations on [`Var`].

use super::kernels::{self, broadcast_iter, broadcast_shape, broadcast_strides, gemm, sum_to, ConvGeom};
use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Split a shape around `axis` into (outer, len, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl Var {
    fn binary(&self, other: &Var, op: BinOp) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        };
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (a, b) = (self.value().clone(), other.value().clone());
        let mut out = vec![0.0f32; out_shape.iter().product()];
        if sa == sb {
            let (ad, bd) = (a.data(), b.data());
            for i in 0..out.len() {
                out[i] = match op {
                    BinOp::Add => ad[i] + bd[i],
                    BinOp::Sub => ad[i] - bd[i],
                    BinOp::Mul => ad[i] * bd[i],
                };
            }
        } else {
            let (sta, stb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            let (ad, bd) = (a.data(), b.data());
            broadcast_iter(&out_shape, &sta, &stb, |o, i, j| {
                out[o] = match op {
                    BinOp::Add => ad[i] + bd[j],
                    BinOp::Sub => ad[i] - bd[j],
                    BinOp::Mul => ad[i] * bd[j],
                };
            });
        }
        let value = Tensor::raw(out_shape.clone(), out);
        Ok(Var::record(
            name,
            value,
            &[self, other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let local: Vec<f32> = match op {
                        BinOp::Add | BinOp::Sub => gd.to_vec(),
                        BinOp::Mul => {
                            let stb = broadcast_strides(&sb, &out_shape);
                            let mut v = vec![0.0f32; gd.len()];
                            let bd = b.data();
                            broadcast_iter(&out_shape, &stb, &stb, |o, j, _| v[o] = gd[o] * bd[j]);
                            v
                        }
                    };
                    Tensor::raw(sa.clone(), sum_to(&local, &out_shape, &sa))
                });
                let gb = needs[1].then(|| {
                    let local: Vec<f32> = match op {
                        BinOp::Add => gd.to_vec(),
                        BinOp::Sub => gd.iter().map(|x| -x).collect(),
                        BinOp::Mul => {
                            let sta = broadcast_strides(&sa, &out_shape);
                            let mut v = vec![0.0f32; gd.len()];
                            let ad = a.data();
                            broadcast_iter(&out_shape, &sta, &sta, |o, i, _| v[o] = gd[o] * ad[i]);
                            v
                        }
                    };
                    Tensor::raw(sb.clone(), sum_to(&local, &out_shape, &sb))
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinOp::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinOp::Mul)
    }

    fn unary(&self, name: &'static str, f: impl Fn(f32) -> f32, df: impl Fn(f32, f32) -> f32 + 'static) -> Var {
        let x = self.value().clone();
        let y = x.map(f);
        let yc = y.clone();
        Var::record(
            name,
            y,
            &[self],
            Box::new(move |g, _| {
                let v = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(yc.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(Tensor::raw(x.shape().to_vec(), v))]
            }),
        )
    }

    pub fn scale(&self, s: f32) -> Var {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f32) -> Var {
        self.unary("add_scalar", move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn silu(&self) -> Var {
        fn sig(x: f32) -> f32 {
            1.0 / (1.0 + (-x).exp())
        }
        self.unary(
            "silu",
            |x| x * sig(x),
            |x, _| {
                let s = sig(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn relu(&self) -> Var {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn square(&self) -> Var {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    /// Sum of all elements (accumulated in f64) as a scalar.
    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        let s: f64 = self.value().data().iter().map(|&x| x as f64).sum();
        Var::record(
            "sum",
            Tensor::scalar(s as f32),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Mean of all elements (accumulated in f64) as a scalar.
    pub fn mean(&self) -> Var {
        let shape = self.shape().to_vec();
        let n = self.value().numel();
        let s: f64 = self.value().data().iter().map(|&x| x as f64).sum();
        Var::record(
            "mean",
            Tensor::scalar((s / n as f64) as f32),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item() / n as f32))]),
        )
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("sum_axis", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = around(&shape, axis);
        let x = self.value().data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Var::record(
            "sum_axis",
            Tensor::raw(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut v = vec![0.0f32; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        v[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::raw(shape.clone(), v))]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = self.shape()[axis] as f32;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let old = self.shape().to_vec();
        let value = self.value().reshape(shape)?;
        Ok(Var::record(
            "reshape",
            value,
            &[self],
            Box::new(move |g, _| vec![Some(g.reshape(&old).expect("same size"))]),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let shape = self.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out, out_shape) = kernels::permute(self.value().data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Var::record(
            "permute",
            Tensor::raw(out_shape.clone(), out),
            &[self],
            Box::new(move |g, _| {
                let (v, s) = kernels::permute(g.data(), &out_shape, &inverse);
                vec![Some(Tensor::raw(s, v))]
            }),
        ))
    }

    /// Materialize a broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let src = self.shape().to_vec();
        let out_shape = broadcast_shape("broadcast_to", &src, shape)?;
        if out_shape != shape {
            return Err(mismatch("broadcast_to", &src, shape));
        }
        let st = broadcast_strides(&src, &out_shape);
        let x = self.value().data();
        let mut out = vec![0.0f32; out_shape.iter().product()];
        broadcast_iter(&out_shape, &st, &st, |o, i, _| out[o] = x[i]);
        Ok(Var::record(
            "broadcast_to",
            Tensor::raw(out_shape.clone(), out),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::raw(src.clone(), sum_to(g.data(), &out_shape, &src)))]),
        ))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        check_axis("narrow", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        let (outer, full, inner) = around(&shape, axis);
        if len == 0 || start + len > full {
            return Err(invalid("narrow", format!("range {start}..{} exceeds extent {full}", start + len)));
        }
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(Var::record(
            "narrow",
            Tensor::raw(out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut v = vec![0.0f32; outer * full * inner];
                let gd = g.data();
                for o in 0..outer {
                    v[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::raw(shape.clone(), v))]
            }),
        ))
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        let base = first.shape().to_vec();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = around(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.value().data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(Var::record(
            "concat",
            Tensor::raw(out_shape, out),
            &refs,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(lens.len());
                for (i, &l) in lens.iter().enumerate() {
                    if needs[i] {
                        let mut v = Vec::with_capacity(outer * l * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            v.extend_from_slice(&gd[s..s + l * inner]);
                        }
                        grads.push(Some(Tensor::raw(shapes[i].clone(), v)));
                    } else {
                        grads.push(None);
                    }
                    offset += l;
                }
                grads
            }),
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        let (outer, len, inner) = around(&shape, axis);
        if len == 0 {
            return Err(invalid("softmax", "empty axis"));
        }
        let x = self.value().data();
        let mut y = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    y[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[at(l)] /= z;
                }
            }
        }
        let y = Tensor::raw(shape.clone(), y);
        let yc = y.clone();
        Ok(Var::record(
            "softmax",
            y,
            &[self],
            Box::new(move |g, _| {
                let (gd, yd) = (g.data(), yc.data());
                let mut v = vec![0.0f32; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f32 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            v[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::raw(shape.clone(), v))]
            }),
        ))
    }

    fn batched_matmul(&self, other: &Var, transpose_b: bool, op: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch(op, &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch(op, &sa, &sb));
        }
        let (a, b) = (self.value().clone(), other.value().clone());
        let mut out = vec![0.0f32; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(Var::record(
            op,
            Tensor::raw(vec![batch, m, n], out),
            &[self, other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    // dA = dC · op(B)^T
                    let mut v = vec![0.0f32; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &b.data()[i * k * n..(i + 1) * k * n],
                            !transpose_b,
                            &mut v[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    Tensor::raw(sa.clone(), v)
                });
                let gb = needs[1].then(|| {
                    let mut v = vec![0.0f32; batch * k * n];
                    for i in 0..batch {
                        let ga = &a.data()[i * m * k..(i + 1) * m * k];
                        let gc = &gd[i * m * n..(i + 1) * m * n];
                        let dst = &mut v[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            // B stored [n, k]: dB = dC^T · A
                            gemm(n, m, k, gc, true, ga, false, dst, 0.0);
                        } else {
                            gemm(k, m, n, ga, true, gc, false, dst, 0.0);
                        }
                    }
                    Tensor::raw(sb.clone(), v)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Var) -> Result<Var> {
        self.batched_matmul(other, false, "bmm")
    }

    /// `[b, m, k] x [b, n, k]^T -> [b, m, n]`.
    pub fn bmm_t(&self, other: &Var) -> Result<Var> {
        self.batched_matmul(other, true, "bmm_t")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, n) = (sa[0], sb[1]);
        let a = self.reshape(&[1, sa[0], sa[1]])?;
        let b = other.reshape(&[1, sb[0], sb[1]])?;
        a.bmm(&b)?.reshape(&[m, n])
    }

    /// Affine map over the last axis: `x [.., in] · w[out, in]^T + b[out]`.
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        let xs = self.shape().to_vec();
        let ws = w.shape();
        if xs.is_empty() || ws.len() != 2 || *xs.last().unwrap() != ws[1] {
            return Err(mismatch("linear", &xs, ws));
        }
        let (d_in, d_out) = (ws[1], ws[0]);
        let rows = self.value().numel() / d_in;
        let x2 = self.reshape(&[1, rows, d_in])?;
        let w3 = w.reshape(&[1, d_out, d_in])?;
        let mut y = x2.bmm_t(&w3)?.reshape(&[rows, d_out])?;
        if let Some(b) = b {
            if b.shape() != [d_out] {
                return Err(mismatch("linear", ws, b.shape()));
            }
            y = y.add(b)?;
        }
        let mut out = xs;
        *out.last_mut().unwrap() = d_out;
        y.reshape(&out)
    }

    /// Rows of `table [v, d]` selected by `idx`, giving `[idx.len(), d]`.
    pub fn gather(&self, idx: &[usize]) -> Result<Var> {
        let s = self.shape().to_vec();
        if s.len() != 2 {
            return Err(invalid("gather", format!("table must be rank 2, got {s:?}")));
        }
        if idx.is_empty() {
            return Err(invalid("gather", "empty index list"));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(invalid("gather", format!("index {bad} out of range for {v} rows")));
        }
        let t = self.value().data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        Ok(Var::record(
            "gather",
            Tensor::raw(vec![idx.len(), d], out),
            &[self],
            Box::new(move |g, _| {
                let mut acc = vec![0.0f32; v * d];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &x) in acc[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += x;
                    }
                }
                vec![Some(Tensor::raw(s.clone(), acc))]
            }),
        ))
    }

    /// 2-D convolution over `[n, c, h, w]` with weights `[o, c, kh, kw]`,
    /// zero padding `pad` and stride `stride`.
    pub fn conv2d(&self, w: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape().to_vec(), w.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(invalid("conv2d", format!("kernel {ws:?} does not fit input {xs:?} (pad {pad})")));
        }
        let geom = ConvGeom {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let co = ws[0];
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(mismatch("conv2d", &ws, b.shape()));
            }
        }
        let (x, wt) = (self.value().clone(), w.value().clone());
        let (k, p, np) = (geom.k(), geom.p(), geom.n * geom.p());
        let cols = kernels::im2col(x.data(), &geom);
        let mut tmp = vec![0.0f32; co * np];
        gemm(co, k, np, wt.data(), false, &cols, false, &mut tmp, 0.0);
        // Keep the unfolded input only if the weight gradient will need it.
        let cols = w.requires_grad().then_some(cols);
        let mut out = kernels::swap01(&tmp, co, geom.n, p);
        if let Some(b) = bias {
            let bd = b.value().data();
            for n in 0..geom.n {
                for (c, &bv) in bd.iter().enumerate() {
                    for v in &mut out[(n * co + c) * p..(n * co + c + 1) * p] {
                        *v += bv;
                    }
                }
            }
        }
        let out_shape = vec![geom.n, co, geom.ho, geom.wo];
        let mut inputs: Vec<&Var> = vec![self, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(Var::record(
            "conv2d",
            Tensor::raw(out_shape, out),
            &inputs,
            Box::new(move |g, needs| {
                let gr = kernels::swap01(g.data(), geom.n, co, p);
                let gx = needs[0].then(|| {
                    let mut dcols = vec![0.0f32; k * np];
                    gemm(k, co, np, wt.data(), true, &gr, false, &mut dcols, 0.0);
                    Tensor::raw(xs.clone(), kernels::col2im(&dcols, &geom))
                });
                let gw = needs[1].then(|| {
                    let cols = cols.as_deref().expect("kept when the weight is tracked");
                    let mut dw = vec![0.0f32; co * k];
                    gemm(co, np, k, &gr, false, cols, true, &mut dw, 0.0);
                    Tensor::raw(ws.clone(), dw)
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| {
                        let db = (0..co).map(|c| gr[c * np..(c + 1) * np].iter().sum()).collect();
                        Tensor::raw(vec![co], db)
                    }));
                }
                grads
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&self) -> Result<Var> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(invalid("upsample2x", format!("expected rank 4, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.value().data();
        let mut out = vec![0.0f32; planes * 4 * h * w];
        for pl in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(pl * 2 * h + y) * 2 * w + xx] = x[(pl * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(Var::record(
            "upsample2x",
            Tensor::raw(vec![s[0], s[1], 2 * h, 2 * w], out),
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut v = vec![0.0f32; planes * h * w];
                for pl in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            v[(pl * h + y / 2) * w + xx / 2] += gd[(pl * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::raw(s.clone(), v))]
            }),
        ))
    }

    /// 2x2 average pooling of `[n, c, h, w]` (even `h`, `w`).
    pub fn avg_pool2x(&self) -> Result<Var> {
        let s = self.shape().to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(invalid("avg_pool2x", format!("expected rank 4 with even extents, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
        let x = self.value().data();
        let mut out = vec![0.0f32; planes * h * w];
        for pl in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(pl * h + y / 2) * w + xx / 2] += 0.25 * x[(pl * 2 * h + y) * 2 * w + xx];
                }
            }
        }
        Ok(Var::record(
            "avg_pool2x",
            Tensor::raw(vec![s[0], s[1], h, w], out),
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut v = vec![0.0f32; planes * 4 * h * w];
                for pl in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            v[(pl * 2 * h + y) * 2 * w + xx] = 0.25 * gd[(pl * h + y / 2) * w + xx / 2];
                        }
                    }
                }
                vec![Some(Tensor::raw(s.clone(), v))]
            }),
        ))
    }

    /// Group normalization over `[n, c, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, groups: usize, gamma: &Var, beta: &Var, eps: f32) -> Result<Var> {
        let s = self.shape().to_vec();
        if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
            return Err(invalid("group_norm", format!("{groups} groups do not divide shape {s:?}")));
        }
        let c = s[1];
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(mismatch("group_norm", &s, gamma.shape()));
        }
        let n = s[0];
        let spatial: usize = s[2..].iter().product();
        let cg = c / groups;
        let m = cg * spatial;
        let x = self.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut rstd = vec![0.0f32; n * groups];
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for g in 0..groups {
                let base = (b * c + g * cg) * spatial;
                let blk = &x[base..base + m];
                let mean = blk.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = blk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
                let r = (1.0 / (var + eps as f64).sqrt()) as f32;
                rstd[b * groups + g] = r;
                for j in 0..m {
                    let xh = (blk[j] - mean as f32) * r;
                    xhat[base + j] = xh;
                    let ch = g * cg + j / spatial;
                    out[base + j] = xh * gd[ch] + bd[ch];
                }
            }
        }
        let gamma_v = gamma.value().clone();
        Ok(Var::record(
            "group_norm",
            Tensor::raw(s.clone(), out),
            &[self, gamma, beta],
            Box::new(move |gout, needs| {
                let go = gout.data();
                let gm = gamma_v.data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for j in 0..spatial {
                            dgamma[ch] += go[base + j] * xhat[base + j];
                            dbeta[ch] += go[base + j];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0f32; go.len()];
                    for b in 0..n {
                        for g in 0..groups {
                            let base = (b * c + g * cg) * spatial;
                            let (mut s1, mut s2) = (0.0f64, 0.0f64);
                            for j in 0..m {
                                let dxh = go[base + j] * gm[g * cg + j / spatial];
                                s1 += dxh as f64;
                                s2 += (dxh * xhat[base + j]) as f64;
                            }
                            let r = rstd[b * groups + g];
                            let (s1, s2) = ((s1 / m as f64) as f32, (s2 / m as f64) as f32);
                            for j in 0..m {
                                let dxh = go[base + j] * gm[g * cg + j / spatial];
                                dx[base + j] = r * (dxh - s1 - xhat[base + j] * s2);
                            }
                        }
                    }
                    Tensor::raw(s.clone(), dx)
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::raw(vec![c], dgamma)),
                    needs[2].then(|| Tensor::raw(vec![c], dbeta)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{backward, Tape};

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Var::constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = Var::constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(a.matmul(&i).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = crate::rng::Stream::new(1);
        let x = Var::constant(rng.normal_tensor(&[2, 3, 5, 5]));
        let mut k = vec![0.0f32; 3 * 3 * 9];
        for c in 0..3 {
            k[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let w = Var::constant(t(&[3, 3, 3, 3], &k));
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert!(y.value().bit_eq(x.value()));
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Var::constant(Tensor::ones(&[1, 2, 8, 8]));
        let w = Var::constant(Tensor::ones(&[4, 2, 3, 3]));
        assert_eq!(x.conv2d(&w, None, 2, 1).unwrap().shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = Var::constant(Tensor::ones(&[2, 3]));
        let b = Var::constant(Tensor::ones(&[4, 2]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
        assert!(a.add(&Var::constant(Tensor::ones(&[2, 2]))).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let y = x.softmax(1).unwrap();
        for r in 0..2 {
            let s: f32 = y.value().data()[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn stop_grad_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = x.stop_grad().mul(&x).unwrap().sum();
        let g = backward(&y).unwrap();
        // d/dx (sg(x) * x) = sg(x)
        assert_eq!(g.wrt(&x).data(), &[1.0, 2.0, 3.0]);
        let z = x.stop_grad().sum();
        assert!(backward(&z).is_err());
    }

    #[test]
    fn linear_gradient_is_constant() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let c = Var::constant(t(&[3], &[3.0, -2.0, 7.0]));
        let g = backward(&x.mul(&c).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(&x).data(), c.value().data());
    }

    #[test]
    fn mean_square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let g = backward(&x.square().mean()).unwrap();
        let want = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.wrt(&x).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reused_value_accumulates_paths() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0]));
        let y = x.add(&x).unwrap().add(&x.scale(3.0)).unwrap().sum();
        assert_eq!(backward(&y).unwrap().wrt(&x).data(), &[5.0, 5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(backward(&x.scale(2.0)), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_do_not_touch_a_tape() {
        let tape = Tape::new();
        let a = Var::constant(Tensor::ones(&[4]));
        let _ = a.add(&a).unwrap().silu().sum();
        assert!(tape.is_empty());
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let table = Var::constant(Tensor::ones(&[4, 2]));
        assert!(table.gather(&[1, 4]).is_err());
        assert_eq!(table.gather(&[3, 0, 3]).unwrap().shape(), &[3, 2]);
    }
}
