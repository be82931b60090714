//! Multi-source adversarial transfer learning for binary image segmentation.
//!
//! N U-Net sub-networks, one per labeled source domain, share a fused target
//! decoder; per-source domain classifiers behind gradient reversal push each
//! encoder towards features shared with the target domain.

pub mod autograd;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod network;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = network::ModelParams<f32>;
pub type Model64 = network::ModelParams<f64>;
