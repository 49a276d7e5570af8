use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("WAV error on {path}: {message}")]
    Wav { path: PathBuf, message: String },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("missing embedding for key {key:?}")]
    MissingEmbedding { key: String },
    #[error("provider error: {message}")]
    Provider { message: String },
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
