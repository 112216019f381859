use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate value range: min = max = {0}")]
    DegenerateRange(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("bad generator parameters: {0}")]
    BadParams(String),

    #[error("bad anomaly label: {0}")]
    BadLabel(String),

    #[error("unknown sample index {0}")]
    UnknownSample(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
