use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in layer {layer} ({part}) at index {index}")]
    NonFiniteGradient {
        layer: usize,
        part: &'static str,
        index: usize,
    },

    #[error("invalid skill latent: {0}")]
    InvalidSkill(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("feedback source failed: {0}")]
    Feedback(String),

    #[error("feedback session {session_id} timed out; training paused")]
    FeedbackTimeout { session_id: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
