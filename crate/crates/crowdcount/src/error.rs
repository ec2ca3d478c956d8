//! Error type shared across the crate.
//!
//! Every fallible operation returns [`Error`]; shape problems always name the
//! offending operation and both shapes so the message is actionable on its own.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was handed tensors whose shapes do not line up.
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A parameter or input value is outside its documented domain.
    #[error("{0}")]
    InvalidArgument(String),

    /// A dot coordinate lies outside the scene bounds.
    #[error("dot ({x}, {y}) outside {width}x{height} scene")]
    DotOutOfBounds { x: f32, y: f32, width: usize, height: usize },

    /// Backward was asked to run from a tensor that is not a traced scalar.
    #[error("backward requires a traced scalar loss (shape [1]); got {0}")]
    NonScalarLoss(String),

    /// Class boundary fitting needs at least five distinct counts.
    #[error("class boundaries need >= 5 distinct counts, got {0}")]
    TooFewDistinctCounts(usize),

    /// Percentile thresholds collapsed; the count distribution is degenerate.
    #[error("class boundaries are not strictly increasing: {0:?}")]
    DegenerateBoundaries([f32; 4]),

    /// Ground truth is identically zero, so scaled metrics are undefined.
    #[error("{op}: ground-truth map is identically zero")]
    ZeroGroundTruth { op: &'static str },

    /// A serialized artifact failed structural validation.
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    /// A pipeline stage was invoked before the stages it depends on.
    #[error("stage '{stage}' requires '{missing}' to be trained first ({hint})")]
    MissingStage {
        stage: &'static str,
        missing: &'static str,
        hint: String,
    },

    /// A training contract was violated (e.g. unfrozen context estimators).
    #[error("{0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, expected: expected.into(), got: got.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
