pub mod checks;
pub mod tensor;
pub mod scene;
pub mod forge;
pub mod nn;
pub mod encoder;
pub mod fusion;
pub mod features;
pub mod decoder;
pub mod error;
pub mod model;
pub mod train;

pub use error::{HtError, HtResult};
