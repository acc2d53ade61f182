//! Dense tensors with reverse-mode differentiation: the operators the channel
//! forecaster needs, an Adam optimizer and a finite-difference gradient checker.

mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_refined, relative_error, GradCheckReport, NARROW_FACTOR, REFINE_ABOVE};
pub use optim::{adam_update, clip_global_norm, AdamConfig, AdamState};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{ParameterSet, Scalar, Tensor};

#[cfg(test)]
pub(crate) use tape::{OpTag, FLIPPED_RULE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
}

/// Uniform Glorot initialization bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
