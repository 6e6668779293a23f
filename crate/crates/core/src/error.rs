use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the design pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(
        "gram matrix is not positive definite (n = {n}, jitter = {jitter:e}); \
         coincident points need a positive jitter"
    )]
    IllConditionedGram { n: usize, jitter: f64 },

    #[error("trajectory diverged at time index {step}")]
    TrajectoryDiverged { step: usize },

    #[error("integration produced a non-finite state")]
    IntegrationDiverged,

    #[error("time index {k} outside signal horizon {first}..={last}")]
    OutOfRange { k: usize, first: usize, last: usize },

    #[error("capability missing: {0}")]
    Capability(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
