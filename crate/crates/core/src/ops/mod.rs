//! Differentiable primitives recorded on a [`Graph`](crate::Graph).

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod shape;
pub mod upsample;

pub use conv::{conv1d_causal_forward, conv3d_forward, effective_kernel, Conv3dGeometry};
pub use elementwise::{gelu, sigmoid, silu, softmax_axis, softplus, Activation};
pub use linalg::linear_forward;
pub use norm::{NormKind, NORM_EPS};
pub use upsample::upsample_hw_forward;
