//! Dense tensors, reverse-mode differentiation, 3×3 SVD and gradient checks.

pub mod checks;
mod gradcheck;
mod params;
mod svd;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck, REL_ERR_FLOOR};
pub use params::ParamStore;
pub use svd::{det, mat_mul, svd3, transpose, Mat3, Svd3};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{DType, Real, Tensor};

pub(crate) use tape::giou_with_grad;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("numerical error: {0}")]
    NoConvergence(String),
    #[error("usage error: {0}")]
    Usage(String),
}

