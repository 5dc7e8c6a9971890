//! Dense tensor algebra and reverse-mode automatic differentiation.
//!
//! Storage is 32-bit row-major; the whole engine is generic over the scalar
//! type so the gradient verifier can re-run any computation at 64-bit
//! precision, where central finite differences are trustworthy.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

use thiserror::Error;

/// Errors from tensor primitives and the tape.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NotFinite { op: &'static str },
    #[error("{op}: zero-norm row {row}, cosine similarity undefined")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("loss function is not deterministic: {0}")]
    Determinism(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
