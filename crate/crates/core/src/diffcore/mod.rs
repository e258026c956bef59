//! Minimal dense-array numeric core with a differentiation contract.
//!
//! Every trainable operation exposes a forward evaluation on the [`Tape`] and
//! an exact input/parameter gradient, validated against central finite
//! differences by [`grad_check`].

mod array;
mod gradcheck;
mod math;
mod tape;

pub use array::NdArray;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::interp_leftmost;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: zero-length vector has no direction")]
    ZeroVector { op: &'static str },
    #[error("quantile level {theta} outside (0, 1)")]
    ThetaOutOfRange { theta: f64 },
    #[error("backward root must be a single-element array")]
    NotScalar,
}

/// A model parameter: value, accumulated gradient, and a trainable flag.
///
/// Frozen parameters keep an identically-zero gradient through any backward
/// pass and are never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: NdArray,
    pub grad: NdArray,
    pub trainable: bool,
}

impl Param {
    pub fn trainable(value: NdArray) -> Self {
        let grad = NdArray::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: NdArray) -> Self {
        let grad = NdArray::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds a gradient contribution; no-op for frozen parameters.
    pub fn accumulate(&mut self, g: &NdArray) {
        if self.trainable {
            self.grad.add_assign(g);
        }
    }
}
