pub mod autograd;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod masking;
pub mod model;
pub mod retrieval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
