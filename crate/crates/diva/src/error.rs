//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DivaError {
    /// An input tensor had the wrong dimensions for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A caller-supplied argument was out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A structural invariant of a domain type was violated.
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    /// An on-disk artifact (checkpoint, .flo file, dataset) is malformed.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Training or inference produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The synthetic scene generator exhausted its resampling budget.
    #[error("generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl From<image::ImageError> for DivaError {
    fn from(e: image::ImageError) -> Self {
        DivaError::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DivaError>;

impl DivaError {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        DivaError::ShapeMismatch {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            DivaError::InvalidArgument(_) => 1,
            DivaError::Numerical(_) => 3,
            _ => 2,
        }
    }
}
