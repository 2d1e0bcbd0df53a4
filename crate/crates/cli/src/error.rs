use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config key `{path}`: {msg}")]
    Config { path: String, msg: String },
    /// Checkpoint written for a different model, codec or format version.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("property failed: {0}")]
    Property(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mvd_core::Error),
    #[error(transparent)]
    Sched(#[from] mvd_sched::Error),
    #[error(transparent)]
    Tensor(#[from] mvd_tensor::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(path: impl Into<String>, msg: impl std::fmt::Display) -> Self {
        Self::Config {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for failed properties and runtime failures, 2 for bad usage,
    /// configs and inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config { .. } | Self::Incompatible(_) | Self::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
