use std::path::PathBuf;

/// Errors raised across the watermarking toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered during {0}")]
    NonFinite(String),

    #[error("parameter store `{0}` is frozen")]
    Frozen(String),

    #[error("frozen parameters changed: hash {expected} became {got}")]
    HashMismatch { expected: String, got: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error at {path:?}: {source}")]
    ImageFile {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
