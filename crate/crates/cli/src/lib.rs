pub mod ablate;
pub mod config;
pub mod control;
pub mod data;
pub mod error;
pub mod output;
pub mod sample;
pub mod train;
pub mod verify;

pub use error::{CliError, Result};
