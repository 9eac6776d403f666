//! Dense tensors, reverse-mode autodiff, Adam and the FDT1 file format.

mod adam;
pub mod fdt;
pub mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{backward, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::hex;
