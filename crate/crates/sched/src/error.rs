use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error("{what} of length {len} cannot be split across {workers} workers")]
    Indivisible {
        what: &'static str,
        len: usize,
        workers: usize,
    },
    #[error(transparent)]
    Tensor(#[from] mvd_tensor::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
