//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("signal too short: {got} samples, need at least {need}")]
    SignalTooShort { got: usize, need: usize },

    #[error("insufficient source material: {0}")]
    InsufficientMaterial(String),

    #[error("output path collision: {0}")]
    PathCollision(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing results for samples: {0:?}")]
    MissingResults(Vec<String>),

    #[error("unknown speaker id: {0}")]
    UnknownSpeaker(String),

    #[error("audio format error: {0}")]
    Audio(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        Error::Audio(e.to_string())
    }
}
