//! Dense `f64` tensors and a reverse-mode autodiff graph.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::finite_diff_check;
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{BatchStats, BnMode, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
