use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unit {unit}: {message}")]
    InvalidUnit { unit: usize, message: String },

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("missing stratum at segment {segment} for history '{pattern}'")]
    MissingStratum { segment: usize, pattern: String },

    #[error("unreachable history at segment {segment}: '{pattern}' has no fitted probability")]
    UnreachableHistory { segment: usize, pattern: String },

    #[error("training diverged: {0}")]
    Training(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by an unsupported treatment-history stratum.
    pub fn is_missing_stratum(&self) -> bool {
        matches!(
            self,
            Error::MissingStratum { .. } | Error::UnreachableHistory { .. }
        )
    }
}
