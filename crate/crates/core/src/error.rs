use thiserror::Error;

use mvd_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unsupported frame count {0}: admissible counts are 1, 8n or 8n+1 (n >= 1)")]
    FrameCount(usize),
    #[error("{what}: {detail}")]
    Shape { what: &'static str, detail: String },
    #[error("temporal alignment violated: {source_name} has length {got}, latent has {expected}")]
    Alignment {
        source_name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown box encoder mode {0:?}")]
    UnknownMode(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        what,
        detail: detail.into(),
    }
}
