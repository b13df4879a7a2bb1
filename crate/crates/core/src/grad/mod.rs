//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Only the kernels the models need are provided: dilated/strided 1-D
//! convolution, batch norm, affine maps, (leaky) ReLU, max pooling,
//! log-softmax, reductions, a few elementwise maps and the sinc band-pass
//! filter bank. Parameters live outside the tape; each forward pass copies
//! them in as leaves and reads their gradients back after [`Tape::backward`].

mod adam;
pub(crate) mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use scalar::Scalar;
pub use tape::{BatchStats, NormStats, SincBankParams, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid reduction axis: {0}")]
    Axis(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
