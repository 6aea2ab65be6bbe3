//! WiFi CSI to 3D human pose.
//!
//! The pipeline is: complex CSI windows are reduced to real amplitude tensors
//! ([`data`]); a shared per-antenna CNN, temporal/antenna attention and a
//! Chebyshev graph-convolution head with self-attention regress 17 joints
//! ([`model`]); [`training`] fits it with AdamW under a cosine schedule and
//! [`metrics`] scores MPJPE, PA-MPJPE and PCK.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); the aliases below
//! pin the common instantiations.

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod skeleton;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;

/// Single-precision network used for training and checkpoints.
pub type Network32 = model::Network<f32>;
/// Double-precision network used for gradient audits.
pub type Network64 = model::Network<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
