//! Dense `f64` tensors with a reverse-mode tape.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{AttnDims, AttnMask};
pub use tensor::Tensor;
