pub mod alignment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod seed;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::Tensor;
