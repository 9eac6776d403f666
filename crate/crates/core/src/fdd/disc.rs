//! Conditioned discriminators on top of the frozen backbone encoder.

use crate::error::{invalid, Result};
use crate::models::layers::{linear, linear_nobias, timestep_embedding, token_mean};
use crate::models::unet::features;
use crate::models::{Binder, Init, ModelConfig};
use crate::numerics::Var;
use crate::vocab::{self, Token};

pub fn init_disc(cfg: &ModelConfig, init: &mut Init) -> Result<()> {
    let (f, d) = (2 * cfg.c2, cfg.disc_dim);
    init.linear("de.pc", d, f)?;
    init.linear("de.pi", d, f)?;
    init.table("de.itok", vocab::vocab_size(), d, 0.5)?;
    init.linear("de.ip", d, d)?;
    for p in ["de", "dv"] {
        init.linear_nobias(&format!("{p}.q"), d, d)?;
        init.linear_nobias(&format!("{p}.k"), d, d)?;
        init.linear_nobias(&format!("{p}.v"), d, d)?;
        init.linear(&format!("{p}.h1"), d, d)?;
        init.linear(&format!("{p}.h2"), 1, d)?;
    }
    init.linear("dv.pf", d, f)?;
    init.table("dv.ctok", vocab::vocab_size(), d, 0.5)?;
    init.linear("dv.cp", d, d)?;
    init.raw("dv.pos", &[cfg.max_frames, d], 0.1)
}

/// Frozen feature tokens `[N, L, 2 c2]`: the half-resolution skip pooled to
/// the middle resolution, concatenated with the middle block output.
pub fn feature_tokens(feat: &Binder, cfg: &ModelConfig, x: &Var) -> Result<Var> {
    let s = features(feat, cfg, x)?;
    let f = Var::concat(&[s.s2.avg_pool2x()?, s.mid], 1)?;
    let [n, c, h, w]: [usize; 4] = f.shape().try_into().expect("encoder output is rank 4");
    f.reshape(&[n, c, h * w])?.permute(&[0, 2, 1])
}

fn attend(b: &Binder, p: &str, x: &Var) -> Result<Var> {
    let d = x.shape()[2];
    let q = linear_nobias(b, &format!("{p}.q"), x)?;
    let k = linear_nobias(b, &format!("{p}.k"), x)?;
    let v = linear_nobias(b, &format!("{p}.v"), x)?;
    let att = q.bmm_t(&k)?.scale(1.0 / (d as f32).sqrt()).softmax(2)?;
    x.add(&att.bmm(&v)?)
}

fn head(b: &Binder, p: &str, pooled: &Var) -> Result<Var> {
    let h = linear(b, &format!("{p}.h1"), pooled)?.silu();
    let out = linear(b, &format!("{p}.h2"), &h)?;
    out.reshape(&[out.shape()[0]])
}

/// `D_e`: one score per frame `[N]` for candidate frames given the input
/// frames and one instruction per row.
pub fn d_edit(b: &Binder, feat: &Binder, cfg: &ModelConfig, candidate: &Var, input: &Var, instr: &[&[Token]]) -> Result<Var> {
    if candidate.shape() != input.shape() || instr.len() != candidate.shape()[0] {
        return Err(invalid("d_edit", "candidate, input and instructions must align row by row"));
    }
    let tc = feature_tokens(feat, cfg, candidate)?;
    let ti = feature_tokens(feat, cfg, input)?;
    let (n, l) = (tc.shape()[0], tc.shape()[1]);
    let d = cfg.disc_dim;
    let pos = Var::constant(timestep_embedding(&(0..l).collect::<Vec<_>>(), d));
    let pc = linear(b, "de.pc", &tc)?.add(&pos)?;
    let pi = linear(b, "de.pi", &ti)?.add(&pos)?;
    let it = linear(b, "de.ip", &token_mean(b, "de.itok", instr)?)?.reshape(&[n, 1, d])?;
    let x = attend(b, "de", &Var::concat(&[pc, pi, it], 1)?)?;
    head(b, "de", &x.mean_axis(1, false)?)
}

/// `D_v`: one score per clip `[B]` for clips of `frames` rows given one
/// caption per clip. Attention runs over time independently at each pixel.
pub fn d_video(b: &Binder, feat: &Binder, cfg: &ModelConfig, video: &Var, frames: usize, captions: &[&[Token]]) -> Result<Var> {
    let n = video.shape()[0];
    if frames == 0 || frames > cfg.max_frames || n != frames * captions.len() {
        return Err(invalid("d_video", format!("{n} rows do not match {} captions of {frames} frames", captions.len())));
    }
    let bsz = captions.len();
    let d = cfg.disc_dim;
    let t = linear(b, "dv.pf", &feature_tokens(feat, cfg, video)?)?;
    let l = t.shape()[1];
    let cap = linear(b, "dv.cp", &token_mean(b, "dv.ctok", captions)?)?.reshape(&[bsz, 1, 1, d])?;
    let seq = t
        .reshape(&[bsz, frames, l, d])?
        .add(&cap)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[bsz * l, frames, d])?
        .add(&b.param("dv.pos")?.narrow(0, 0, frames)?)?;
    let x = attend(b, "dv", &seq)?;
    let pooled = x.reshape(&[bsz, l * frames, d])?.mean_axis(1, false)?;
    head(b, "dv", &pooled)
}
