//! Occlusion-aware masked diffusion: grids, noise schedule, a small
//! convolutional backbone, a learned prior over missingness masks, guided
//! mask sampling, context/query partitioning, a conditional imputer,
//! evaluation metrics and a synthetic data generator.

pub mod error;
pub mod grids;
pub mod imputer;
pub mod guided;
pub mod mask_prior;
pub mod metrics;
pub mod nnet;
pub mod partitioning;
pub mod rng;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
