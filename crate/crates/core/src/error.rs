use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("{path}: format error at byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config error at key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("non-finite loss on video {video}: {detail}")]
    NonFiniteLoss { video: String, detail: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::Config { .. } | Error::Spec(_) => 3,
            Error::Numerics(_) | Error::NonFiniteLoss { .. } => 4,
            Error::CheckpointMismatch(_) => 5,
            Error::Shape(_) | Error::Contract(_) | Error::Domain(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
