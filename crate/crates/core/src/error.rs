use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("text encoder failed on dimension {dimension}: {message}")]
    Encoder { dimension: usize, message: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unmatched files: {}", .0.join(", "))]
    MissingPair(Vec<String>),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("consensus needs at least one view")]
    EmptyViews,

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
