//! Procedural sprite-video world, edit instructions, oracle and datasets.

pub mod dataset;
pub mod instruction;
pub mod ppm;
pub mod world;

pub use dataset::{build_datasets, sample_spec, DataPoint, Datasets, DatasetPlan, EditPair, EvalItem, FrameItem, VideoItem};
pub use instruction::{oracle_edit, sample_instruction, EditParams, InstructionRecord, Task};
pub use world::{Background, BackgroundKind, Shape, Sprite, Style, Texture, WorldSpec};
