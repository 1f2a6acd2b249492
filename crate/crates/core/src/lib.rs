//! Gradient-based training data attribution with efficient ensembles.

pub mod artifact;
pub mod cost;
pub mod data;
pub mod ensembles;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod lora;
pub mod mask;
pub mod model;
pub mod nn;
pub mod output;
pub mod rng;
pub mod tensor;
pub mod tda;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor2;
