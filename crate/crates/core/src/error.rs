use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("truncated payload at symbol {position}")]
    Truncated { position: usize },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("model hash mismatch between stream and supplied model")]
    ModelMismatch,

    #[error("training diverged at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for errors that indicate a corrupted or mismatched stream.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            Error::Truncated { .. } | Error::Checksum { .. } | Error::ModelMismatch | Error::Format(_)
        )
    }
}
