//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ProbeResult};
pub use graph::{sigmoid, softmax_rows_values, softplus, BackwardFault, Gradients, Graph, GroupStats, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{matmul_values, Tensor};
