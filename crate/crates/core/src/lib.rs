pub mod autograd;
pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evalstat;
pub mod losses;
pub mod mregnet;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
