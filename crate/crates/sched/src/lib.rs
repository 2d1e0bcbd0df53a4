//! Mixed-resolution bucket scheduling and a deterministic, single-process
//! simulation of sequence-parallel attention.

pub mod bucket;
pub mod error;
pub mod sp;

pub use error::{Error, Result};
