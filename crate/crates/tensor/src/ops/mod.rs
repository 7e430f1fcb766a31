//! Graph operators. Each submodule adds methods to [`Graph`](crate::Graph)
//! and exposes the plain forward kernels for use outside a graph.

mod basic;
mod conv;
mod resample;

pub use conv::{conv2d_forward, conv_transpose2d_forward};
pub use resample::{avg_pool2_forward, pad_replicate_forward, resize_bilinear_forward};
