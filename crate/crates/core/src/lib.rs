//! Lightweight pyramidal optical flow: a shared two-stream feature pyramid,
//! cascaded flow inference with feature warping and short-range cost
//! volumes, and feature-driven local convolution for flow regularization.

pub mod bases;
pub mod checkpoint;
pub mod costvolume;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod flowio;
pub mod gradsuite;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod regularizer;
pub mod train;
pub mod viz;
pub mod warp;

pub use error::{Error, Result};
pub use model::{LiteFlowNet, ModelConfig, ParamReport};
