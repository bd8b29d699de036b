//! Tri-plane selective state-space adapters for slice-wise ViT encoders on
//! 3D volumes: a small dense tensor engine with reverse-mode differentiation,
//! the Mamba-style plane scanners, the adapter, encoder, decoder, losses, and
//! the training/inference pipeline around them.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod selfcheck;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
