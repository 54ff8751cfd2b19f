use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PmalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("invalid archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("runs are not aligned: {0}")]
    Alignment(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unknown sample id {0}")]
    UnknownSample(u32),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("malformed csv {path} line {line}: {reason}")]
    Csv {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, PmalError>;

impl PmalError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        PmalError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn archive(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PmalError::Archive {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PmalError::Validation(_)
                | PmalError::Dimension { .. }
                | PmalError::Alignment(_)
                | PmalError::Archive { .. }
                | PmalError::UnknownSample(_)
                | PmalError::EmptyClass(_)
                | PmalError::Csv { .. }
        )
    }
}
