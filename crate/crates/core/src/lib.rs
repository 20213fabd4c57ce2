//! Hydra: a shared-body, many-head CNN ensemble for region classification in
//! satellite imagery, with the FMOW weighted F-measure and strict-majority
//! fusion.

pub mod augmentation;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod fusion;
pub mod imageio;
pub mod metrics;
pub mod micronet;
pub mod run;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
pub use tensor::Tensor;
