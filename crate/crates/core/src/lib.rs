//! Factorized diffusion distillation at desk scale.

pub mod config;
pub mod diffusion;
pub mod models;
pub mod error;
pub mod eval;
pub mod fdd;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod selftest;
pub mod teachers;
pub mod train;
pub mod vocab;
pub mod worldgen;

pub use error::{Error, Result};
