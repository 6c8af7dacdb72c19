use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument to an operation (shape mismatch, out-of-range id, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Calling an operation in a mode it does not support, e.g. passing a
    /// speaker embedding to a speaker-agnostic model.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("corpus consistency error: {0}")]
    Corpus(String),

    #[error("triplet layout error: {0}")]
    Layout(String),

    #[error("numeric error{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric {
        step: Option<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            step: None,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Usage(_) | Error::Config(_) => 1,
            Error::Format { .. } | Error::Corpus(_) | Error::Layout(_) | Error::Io { .. } => 2,
            Error::Numeric { .. } => 3,
        }
    }
}
