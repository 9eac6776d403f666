//! Raw array kernels shared by the differentiable ops.

use super::tensor::strides;
use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c` for row-major operands, where `op(a)` is
/// `[m, k]` and `op(b)` is `[k, n]`. A transposed operand is stored with its
/// two extents swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the index ranges implied by the
    // extents and strides above (checked in debug builds).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-rank broadcast shape (shorter shapes are left-padded with 1).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pa = pad_shape(a, rank);
    let pb = pad_shape(b, rank);
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        out.push(match (x, y) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        });
    }
    Ok(out)
}

pub(crate) fn pad_shape(s: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - s.len()];
    out.extend_from_slice(s);
    out
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let padded = pad_shape(shape, out.len());
    let st = strides(&padded);
    padded
        .iter()
        .zip(st)
        .map(|(&d, s)| if d == 1 { 0 } else { s })
        .collect()
}

/// Visit every element of `out` with the matching offsets into two strided inputs.
pub(crate) fn broadcast_iter(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sum a gradient of shape `out` down to a broadcast operand of shape `target`.
pub(crate) fn sum_to(g: &[f32], out: &[usize], target: &[usize]) -> Vec<f32> {
    if out == target {
        return g.to_vec();
    }
    let st = broadcast_strides(target, out);
    let mut acc = vec![0.0f32; target.iter().product()];
    broadcast_iter(out, &st, &st, |o, i, _| acc[i] += g[o]);
    acc
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    pub fn p(&self) -> usize {
        self.ho * self.wo
    }
}

/// Valid output columns `ox` for kernel column `kx`: those with
/// `0 <= ox * stride + kx - pad < w`.
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo, hi.max(lo))
}

fn pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Unfold `x` into columns `[ci*kh*kw, n*ho*wo]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    if pointwise(g) {
        return swap01(x, g.n, g.ci, g.h * g.w);
    }
    let (p, np) = (g.p(), g.n * g.p());
    let mut cols = vec![0.0f32; g.k() * np];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let (lo, hi) = valid_range(g, kx);
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &x[(n * g.ci + c) * g.h * g.w..(n * g.ci + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo >= hi {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[n * p + oy * g.wo + lo..n * p + oy * g.wo + hi];
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            drow.copy_from_slice(&srow[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (i, d) in drow.iter_mut().enumerate() {
                                *d = srow[ix0 + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    if pointwise(g) {
        return swap01(cols, g.ci, g.n, g.h * g.w);
    }
    let (p, np) = (g.p(), g.n * g.p());
    let mut x = vec![0.0f32; g.n * g.ci * g.h * g.w];
    for c in 0..g.ci {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let (lo, hi) = valid_range(g, kx);
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.ci + c) * g.h * g.w..(n * g.ci + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo >= hi {
                            continue;
                        }
                        let srow = &src[n * p + oy * g.wo + lo..n * p + oy * g.wo + hi];
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            for (d, &s) in drow[ix0..ix0 + (hi - lo)].iter_mut().zip(srow) {
                                *d += s;
                            }
                        } else {
                            for (i, &s) in srow.iter().enumerate() {
                                drow[ix0 + i * g.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p]` <-> `[c, n, p]` block transpose.
pub(crate) fn swap01(x: &[f32], a: usize, b: usize, inner: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for j in 0..b {
        for i in 0..a {
            out.extend_from_slice(&x[(i * b + j) * inner..(i * b + j + 1) * inner]);
        }
    }
    out
}

/// Permute axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_st = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let mut out = vec![0.0f32; x.len()];
    broadcast_iter(&out_shape, &st, &st, |o, i, _| out[o] = x[i]);
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
        let np = g.n * g.p();
        let mut cols = vec![0.0; g.k() * np];
        for c in 0..g.ci {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    for n in 0..g.n {
                        for oy in 0..g.ho {
                            for ox in 0..g.wo {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    cols[row * np + n * g.p() + oy * g.wo + ox] =
                                        x[((n * g.ci + c) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_reference_and_col2im_is_adjoint() {
        for &(h, k, stride, pad) in &[(5, 3, 1, 1), (6, 3, 2, 1), (4, 1, 1, 0), (7, 3, 2, 0), (3, 3, 1, 2), (4, 1, 2, 0)] {
            let g = ConvGeom {
                n: 2,
                ci: 3,
                h,
                w: h + 1,
                kh: k,
                kw: k,
                stride,
                pad,
                ho: (h + 2 * pad - k) / stride + 1,
                wo: (h + 1 + 2 * pad - k) / stride + 1,
            };
            let x: Vec<f32> = (0..g.n * g.ci * g.h * g.w).map(|i| (i as f32 * 0.37).sin()).collect();
            let cols = im2col(&x, &g);
            assert_eq!(cols, naive_im2col(&x, &g), "{h} {k} {stride} {pad}");
            // <im2col(x), c> == <x, col2im(c)>
            let c: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.11).cos()).collect();
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let back = col2im(&c, &g);
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            assert!((lhs - rhs).abs() < 1e-3, "{lhs} {rhs}");
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
        let g = vec![1.0f32; 24];
        assert_eq!(sum_to(&g, &[2, 3, 4], &[1, 3, 1]), vec![8.0; 3]);
    }

    #[test]
    fn permute_transposes_matrix() {
        let (out, shape) = permute(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
