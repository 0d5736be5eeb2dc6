use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, sizes or settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside the domain of an operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed or out-of-vocabulary data.
    #[error("data error: {0}")]
    Data(String),

    /// A data file failed to parse at a specific line.
    #[error("data error: {}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// NaN or infinity reached a place where it must not.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A checkpoint and a dataset (or two configs) do not fit together.
    #[error("incompatible: {0}")]
    Compat(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Compat(_) => 5,
        }
    }
}
