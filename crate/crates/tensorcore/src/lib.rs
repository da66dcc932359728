//! Minimal differentiable computation layer.
//!
//! Networks are plain layer stacks ([`Network`]) evaluated batch-major on
//! NHWC tensors. Forward passes return a [`Cache`] that [`Network::backward`]
//! consumes to produce exact reverse-mode gradients. Everything is generic over
//! [`Scalar`] so the same code runs in `f32` for training and `f64` for
//! finite-difference verification.

mod adam;
mod error;
mod feature;
mod gradcheck;
mod layer;
mod network;
mod ops;
mod params;
mod scalar;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::TensorError;
pub use feature::{FeatureCache, FeatureGrads, FeatureNet};
pub use gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use layer::{LayerSpec, Shape};
pub use network::{Cache, Network};
pub use params::{ParamSet, Params};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
