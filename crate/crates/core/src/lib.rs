pub mod checkpoint;
pub mod eda;
pub mod encoders;
pub mod error;
pub mod features;
pub mod model;
pub mod nn;
pub mod params;
pub mod pit;
pub mod scoring;
pub mod simulate;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;
