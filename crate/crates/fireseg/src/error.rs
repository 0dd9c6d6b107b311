//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// On-disk format violation (bad magic, truncated payload, unsupported
    /// TIFF feature, wrong bit depth, ...).
    #[error("format: {0}")]
    Format(String),

    #[error("band {0} not present in scene")]
    MissingBand(u8),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Training aborted because the loss left the representable range.
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A tensor handed to the gradient checker never received a gradient.
    #[error("parameter {0} is detached from the loss graph")]
    DetachedParameter(String),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
