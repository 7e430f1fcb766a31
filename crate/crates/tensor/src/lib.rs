//! Dense `n × c × h × w` tensors and a recorded-graph reverse-mode
//! differentiator with the layer set a pyramidal flow network needs.

mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{directional_check_params, finite_diff_check, finite_diff_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, Operator, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Shape, Tensor};
