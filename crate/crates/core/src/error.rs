use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the distillation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Input(_) | Error::ConfigMismatch(_) => {
                "config"
            }
            Error::Format { .. } => "format",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } | Error::Serde(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
