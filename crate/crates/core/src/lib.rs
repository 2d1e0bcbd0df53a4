pub mod codec;
pub mod cond;
pub mod error;
pub mod flow;
pub mod layers;
pub mod mvdit;
pub mod optim;
pub mod params;
pub mod scene;
pub mod train;
pub mod video;

pub use error::{Error, Result};
