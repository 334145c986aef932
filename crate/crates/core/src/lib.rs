pub mod backbone;
pub mod check;
pub mod cli;
pub mod config;
pub mod error;
pub mod heads;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod regions;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, GradMap, Tensor};
