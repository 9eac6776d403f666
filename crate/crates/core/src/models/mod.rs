//! The shared backbone, the edit and video adapters, LoRA, and the variant
//! compositions built from them.

pub mod compose;
pub mod edit;
pub mod layers;
pub mod lora;
pub mod params;
pub mod unet;
pub mod video;

pub use compose::{compose_forward, edit_longer_video, sample_variant, Conds, Variant};
pub use params::{Binder, Component, Init, LoraSpec, ParamStore};

use crate::error::{invalid, Result};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Image channels.
    pub channels: usize,
    pub c1: usize,
    pub c2: usize,
    /// Caption/timestep embedding width.
    pub emb: usize,
    pub groups: usize,
    /// Instruction embedding width of the edit adapter.
    pub instr_dim: usize,
    /// Longest clip the temporal position table covers.
    pub max_frames: usize,
    pub first_frame: bool,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Width of the discriminator heads.
    pub disc_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            c1: 32,
            c2: 64,
            emb: 64,
            groups: 8,
            instr_dim: 8,
            max_frames: 8,
            first_frame: true,
            lora_rank: 4,
            lora_alpha: 4.0,
            disc_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c1 % self.groups != 0 || self.c2 % self.groups != 0 {
            return Err(invalid("model", format!("groups {} must divide c1 {} and c2 {}", self.groups, self.c1, self.c2)));
        }
        if self.lora_rank == 0 {
            return Err(invalid("model", "LoRA rank must be at least 1"));
        }
        if self.emb % 2 != 0 {
            return Err(invalid("model", "embedding width must be even"));
        }
        Ok(())
    }

    pub fn lora(&self) -> LoraSpec {
        LoraSpec {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
        }
    }
}

/// A model: configuration plus every parameter created so far.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh backbone only.
    pub fn new(cfg: ModelConfig, rng: &Stream) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        unet::init_backbone(
            &cfg,
            &mut Init {
                store: &mut params,
                rng: rng.split("theta"),
            },
        )?;
        Ok(Model { cfg, params })
    }

    /// Attach a fresh edit adapter initialized from the current backbone.
    pub fn attach_edit(&mut self, rng: &Stream) -> Result<()> {
        let backbone = self.params.clone();
        edit::init_edit(
            &self.cfg,
            &backbone,
            &mut Init {
                store: &mut self.params,
                rng: rng.split("edit"),
            },
        )
    }

    pub fn attach_video(&mut self, rng: &Stream) -> Result<()> {
        video::init_video(
            &self.cfg,
            &mut Init {
                store: &mut self.params,
                rng: rng.split("video"),
            },
        )
    }

    pub fn attach_lora(&mut self, rng: &Stream) -> Result<()> {
        let backbone = self.params.clone();
        lora::init_lora(
            &self.cfg,
            &backbone,
            &mut Init {
                store: &mut self.params,
                rng: rng.split("align"),
            },
        )
    }
}
