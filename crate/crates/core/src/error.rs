use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("innovation covariance is singular or ill-conditioned at step {step} (condition {condition:e})")]
    Singular { step: usize, condition: f64 },

    #[error("posterior covariance became indefinite at step {step} (min eigenvalue {min_eigenvalue:e})")]
    Degenerate { step: usize, min_eigenvalue: f64 },

    #[error("filter diverged at step {step}: |x| = {norm:e}")]
    Diverged { step: usize, norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("inconsistent contents: {0}")]
    Inconsistent(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::Degenerate { .. }
                | Error::Diverged { .. }
                | Error::NonFinite(_)
        )
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
