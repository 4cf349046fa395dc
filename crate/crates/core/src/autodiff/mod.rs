//! Dense `f64` tensors and a taped reverse-mode differentiation graph.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{finite_difference_check, relative_error, FdCoordinate, FdReport, KINK_THRESHOLD, REL_ERROR_FLOOR};
pub use graph::{evaluate, gradient, Graph, Var};
pub(crate) use graph::log_sum_exp;
pub use params::{GradMap, ParamTree};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("graph input {0:?} is not bound")]
    UnboundInput(String),
    #[error("no graph node named {0:?}")]
    UnknownName(String),
    #[error("index {index} out of range {bound} in {op}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}
