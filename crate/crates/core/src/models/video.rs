//! Video adapter: temporal self-attention along the frame axis at every
//! spatial location of selected backbone blocks. Output projections start at
//! zero, so a fresh adapter is the identity.

use super::layers::{linear, linear_nobias, norm, repeat_rows};
use super::params::{Binder, Init};
use super::ModelConfig;
use crate::error::{invalid, Result};
use crate::numerics::Var;

/// Per-pass context for the temporal layers.
pub struct Temporal {
    pub frames: usize,
    /// Activated conditioning `[N, emb]`.
    pub cond: Var,
    /// First frame of each clip, `[B, C, H, W]`.
    pub first: Option<Var>,
}

/// `(name, channels)` of every temporal layer.
pub fn layers(cfg: &ModelConfig) -> [(&'static str, usize); 5] {
    [
        ("video.l1", cfg.c1),
        ("video.l2", cfg.c2),
        ("video.lm", cfg.c2),
        ("video.l3", cfg.c2),
        ("video.l4", cfg.c1),
    ]
}

pub fn init_video(cfg: &ModelConfig, init: &mut Init) -> Result<()> {
    for (p, c) in layers(cfg) {
        init.norm(&format!("{p}.n"), c)?;
        init.linear(&format!("{p}.cproj"), c, cfg.emb)?;
        if cfg.first_frame {
            init.conv(&format!("{p}.fproj"), c, cfg.channels, 1)?;
        }
        init.raw(&format!("{p}.pos"), &[cfg.max_frames, c], 0.1)?;
        for m in ["q", "k", "v"] {
            init.linear_nobias(&format!("{p}.{m}"), c, c)?;
        }
        init.linear(&format!("{p}.m1"), 2 * c, c)?;
        init.linear(&format!("{p}.m2"), c, 2 * c)?;
        init.zero_linear(&format!("{p}.o"), c, c)?;
    }
    Ok(())
}

pub fn temporal(b: &Binder, cfg: &ModelConfig, p: &str, h: &Var, t: &Temporal) -> Result<Var> {
    let [n, c, hh, ww]: [usize; 4] = h.shape().try_into().map_err(|_| invalid("temporal", "expected [N, C, H, W]"))?;
    let f = t.frames;
    if f == 0 || n % f != 0 {
        return Err(invalid("temporal", format!("{n} rows are not whole clips of {f} frames")));
    }
    if f > cfg.max_frames {
        return Err(invalid("temporal", format!("{f} frames exceed the {} the adapter covers", cfg.max_frames)));
    }
    let bsz = n / f;
    let hw = hh * ww;
    let mut u = norm(b, &format!("{p}.n"), h, cfg.groups)?;
    u = u.add(&linear(b, &format!("{p}.cproj"), &t.cond)?.reshape(&[n, c, 1, 1])?)?;
    if let (Some(first), true) = (&t.first, cfg.first_frame) {
        let mut img = first.clone();
        while img.shape()[2] > hh {
            img = img.avg_pool2x()?;
        }
        let w = b.weight(&format!("{p}.fproj.w"))?;
        let ff = img.conv2d(&w, Some(&b.param(&format!("{p}.fproj.b"))?), 1, 0)?;
        u = u.add(&repeat_rows(&ff, f)?)?;
    }
    let seq = u
        .reshape(&[bsz, f, c, hw])?
        .permute(&[0, 3, 1, 2])?
        .reshape(&[bsz * hw, f, c])?
        .add(&b.param(&format!("{p}.pos"))?.narrow(0, 0, f)?)?;
    let q = linear_nobias(b, &format!("{p}.q"), &seq)?;
    let k = linear_nobias(b, &format!("{p}.k"), &seq)?;
    let v = linear_nobias(b, &format!("{p}.v"), &seq)?;
    let att = q.bmm_t(&k)?.scale(1.0 / (c as f32).sqrt()).softmax(2)?;
    let a = att.bmm(&v)?;
    let m = a.add(&linear(b, &format!("{p}.m2"), &linear(b, &format!("{p}.m1"), &a)?.silu())?)?;
    let o = linear(b, &format!("{p}.o"), &m)?
        .reshape(&[bsz, hw, f, c])?
        .permute(&[0, 2, 3, 1])?
        .reshape(&[n, c, hh, ww])?;
    h.add(&o)
}
