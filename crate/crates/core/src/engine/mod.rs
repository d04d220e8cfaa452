//! Minimal tensor and reverse-mode autodiff engine used by the network.

pub mod graph;
pub mod kernels;
pub mod tensor;

pub use graph::{BnState, Gradients, Graph, Var};
pub use tensor::Tensor;
