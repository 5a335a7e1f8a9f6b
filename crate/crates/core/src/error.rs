use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch ({detail})")]
    Shape {
        primitive: &'static str,
        detail: String,
    },

    #[error("segment-softmax: segment key {key} outside 0..{num_segments}")]
    UnknownSegment { key: usize, num_segments: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("forward pass is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("validation error at {path}: {message}")]
    Validation { path: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown model kind `{given}` (valid kinds: {valid})")]
    UnknownModelKind { given: String, valid: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            primitive,
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Errors caused by bad user input (files, flags, configs) rather than by a
    /// bug or an environment failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::InvalidInput(_)
                | Error::UnknownModelKind { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}
