//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod optim;
pub mod special;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::{Binding, ParamSet, Sgd};
pub use tensor::Tensor;
