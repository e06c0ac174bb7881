use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the scoring pipeline.
///
/// The variants are grouped so that a command-line front end can map them to
/// exit codes: configuration problems, data problems and training divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
