//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Green channel too small to normalize against, or a zero-norm vector.
    #[error("degenerate chromaticity: {0}")]
    DegenerateChromaticity(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("validity mask has no valid pixel")]
    EmptyMask,

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Rejection-sampling budget exhausted while generating scene data.
    #[error("generation failure: {0}")]
    GenerationFailure(String),

    #[error("estimator failure: {0}")]
    EstimatorFailure(String),

    /// On-disk payload missing, truncated, or inconsistent with its header.
    #[error("format error in {file}: {reason}")]
    FormatError { file: String, reason: String },

    #[error("split error: {0}")]
    SplitError(String),

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(file: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::FormatError {
            file: file.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
