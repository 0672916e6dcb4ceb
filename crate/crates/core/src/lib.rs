pub mod alignment;
pub mod console;
pub mod archive;
pub mod autograd;
pub mod encoder;
pub mod error;
pub mod model;
pub mod params;
pub mod predictor;
pub mod retrieval;
pub mod train;
pub mod verify;
pub mod view_forge;

pub use error::{Error, Result};
