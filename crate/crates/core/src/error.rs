use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid embodiment spec: {0}")]
    InvalidSpec(String),

    #[error("{0}")]
    Invalid(String),

    #[error("dataset is empty")]
    Empty,
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        DataError::Parse { line, msg: msg.into() }
    }
}

pub type DataResult<T> = std::result::Result<T, DataError>;

/// Errors from simulation, models, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Net(#[from] netcore::NetError),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("model has not been trained")]
    Untrained,

    #[error("{0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {0}; run the producing command first")]
    MissingArtifact(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numeric, 5 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Data(_) | Error::Dimension(_) => 3,
            Error::NonFiniteLoss { .. } => 4,
            Error::Net(netcore::NetError::NonFinite { .. } | netcore::NetError::NonFiniteGradient(_)) => 4,
            Error::Net(_) => 3,
            Error::MissingArtifact(_) | Error::Untrained => 5,
        }
    }

    /// Folds into the numeric-core error type (for netcore callbacks).
    pub fn into_net(self) -> netcore::NetError {
        match self {
            Error::Net(e) => e,
            other => netcore::NetError::Shape {
                op: "model",
                detail: other.to_string(),
            },
        }
    }
}
