//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands were expected to have identical shapes.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Matrix product inner extents disagree.
    #[error("matmul: inner extent mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    InnerExtentMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    /// Operand has the wrong rank or extent for the operation.
    #[error("{op}: invalid operand shape {shape:?}: {reason}")]
    BadOperand {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// Configuration violates a documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Input data failed validation (bad file contents, mismatched extents, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Gradient for a named parameter became non-finite during training.
    #[error("non-finite gradient in parameter `{param}`")]
    NanGradient { param: String },

    /// Training loss exceeded the divergence guard.
    #[error("training diverged: loss {loss} exceeds 10x initial loss {initial}")]
    Diverged { loss: f64, initial: f64 },

    /// Reverse pass invoked twice on the same tape.
    #[error("backward already ran on this tape; record a fresh tape first")]
    TapeConsumed,

    /// Reverse pass seeded from a non-scalar value.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    /// The CLI maps these to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InnerExtentMismatch { .. }
                | Error::BadOperand { .. }
                | Error::InvalidConfig(_)
                | Error::InvalidInput(_)
                | Error::Format(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
