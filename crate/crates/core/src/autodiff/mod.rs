//! Minimal reverse-mode automatic differentiation over dense tensors.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use tensor::Tensor;
