use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DlnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DlnError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("degenerate rank: {0}")]
    DegenerateRank(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DlnError {
    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        DlnError::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DlnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DlnError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DlnError::NonFinite(_) | DlnError::NotPositiveDefinite(_)
        )
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(DlnError::dims(context, expected, actual))
    }
}
