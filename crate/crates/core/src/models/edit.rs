//! ControlNet-style edit adapter: a trainable copy of the backbone encoder
//! fed with the noisy frame, the input frame and an instruction plane, whose
//! features enter the backbone decoder through zero-initialized 1x1 convs.

use super::layers::{conv, linear, token_mean};
use super::params::{Binder, Init, ParamStore};
use super::unet::encoder;
use super::ModelConfig;
use crate::error::Result;
use crate::numerics::{Tensor, Var};
use crate::vocab::{self, Token};

/// Residuals added to the backbone's skip and middle features.
pub struct EditResiduals {
    pub s1: Var,
    pub s2: Var,
    pub mid: Var,
}

const COPIED: [&str; 5] = ["e1", "d1", "e2", "d2", "mid"];

pub fn init_edit(cfg: &ModelConfig, backbone: &ParamStore, init: &mut Init) -> Result<()> {
    let (c1, c2, di) = (cfg.c1, cfg.c2, cfg.instr_dim);
    init.table("edit.itok", vocab::vocab_size(), di, 0.5)?;
    init.linear("edit.iproj", cfg.emb, di)?;

    // Fusion conv: the noisy-frame channels start as the backbone input conv.
    let cin = 2 * cfg.channels + di;
    init.conv("edit.fuse", c1, cin, 3)?;
    let w_in = backbone.get("theta.in.w")?;
    let mut w = init.store.get("edit.fuse.w")?.to_vec();
    let k = 9;
    for o in 0..c1 {
        for c in 0..cfg.channels {
            for j in 0..k {
                w[(o * cin + c) * k + j] = w_in.data()[(o * cfg.channels + c) * k + j];
            }
        }
    }
    init.store.insert("edit.fuse.w", Tensor::from_vec(&[c1, cin, 3, 3], w)?)?;
    init.store.insert("edit.fuse.b", backbone.get("theta.in.b")?.clone())?;

    for block in COPIED {
        let from = format!("theta.{block}.");
        for (name, t) in backbone.iter().filter(|(n, _)| n.starts_with(&from)) {
            init.store.insert(format!("edit.{}", &name["theta.".len()..]), t.clone())?;
        }
    }
    init.zero_conv("edit.z1", c1, c1, 1)?;
    init.zero_conv("edit.z2", c2, c2, 1)?;
    init.zero_conv("edit.zm", c2, c2, 1)
}

/// Adapter residuals for noisy frames `x` `[N, C, H, W]`, input frames
/// `c_img` (same shape), one instruction per row and the backbone's
/// conditioning embedding before activation.
pub fn residuals(b: &Binder, cfg: &ModelConfig, x: &Var, c_img: &Var, instr: &[&[Token]], cond: &Var) -> Result<EditResiduals> {
    let n = x.shape()[0];
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let di = cfg.instr_dim;
    let emb = token_mean(b, "edit.itok", instr)?;
    let cond = cond.add(&linear(b, "edit.iproj", &emb)?)?.silu();
    let plane = emb.reshape(&[n, di, 1, 1])?.broadcast_to(&[n, di, h, w])?;
    let h0 = conv(b, "edit.fuse", &Var::concat(&[x.clone(), c_img.clone(), plane], 1)?, 1, 1)?;
    let s = encoder(b, cfg, "edit", &h0, &cond, None)?;
    Ok(EditResiduals {
        s1: conv(b, "edit.z1", &s.s1, 1, 0)?,
        s2: conv(b, "edit.z2", &s.s2, 1, 0)?,
        mid: conv(b, "edit.zm", &s.mid, 1, 0)?,
    })
}
