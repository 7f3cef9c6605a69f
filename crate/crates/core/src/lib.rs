pub mod data;
pub mod elements;
pub mod encoder;
pub mod error;
pub mod formula;
pub mod layers;
pub mod metrics;
pub mod model_file;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
