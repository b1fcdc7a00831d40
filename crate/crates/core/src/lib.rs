//! Progressive dense V-network lobe segmentation: volume I/O, synthetic
//! lobe phantoms, the networks and their losses, training and evaluation
//! statistics.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! common `f32` and `f64` instantiations.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod phantom;
pub mod scalar;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Volume32 = volume::Volume<f32>;
pub type Volume64 = volume::Volume<f64>;
pub type Parameters32 = networks::Parameters<f32>;
pub type Parameters64 = networks::Parameters<f64>;
