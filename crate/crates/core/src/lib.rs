//! Liver and liver-lesion segmentation with a 2.5D residual U-Net cascade.
//!
//! Everything numerical is implemented here: layer kernels and their
//! gradients, the network, the SGD trainer, volume preprocessing, 3-D
//! connected components, the two-stage inference cascade and the evaluation
//! metrics.

pub mod cascade;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod morpho;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Dims, LabelMap, Real, Tensor};
