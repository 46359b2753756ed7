//! Crate-wide error type.

use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A precondition on an argument was violated.
    InvalidArgument(&'static str),
    /// Tensor or grid shapes do not agree.
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    /// A step index lies outside `1..=T`.
    StepOutOfRange { t: usize, t_steps: usize },
    /// A computation produced NaN or infinity.
    NonFinite(&'static str),
    /// `backward` was called twice on the same recorded graph.
    GraphConsumed,
    /// The input is degenerate for the requested statistic.
    Degenerate(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(what) => write!(f, "invalid argument: {what}"),
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected:?}, got {got:?}")
            }
            Error::StepOutOfRange { t, t_steps } => {
                write!(f, "step index {t} outside 1..={t_steps}")
            }
            Error::NonFinite(context) => write!(f, "non-finite value in {context}"),
            Error::GraphConsumed => write!(f, "backward already ran on this graph"),
            Error::Degenerate(what) => write!(f, "degenerate input: {what}"),
        }
    }
}

impl core::error::Error for Error {}
