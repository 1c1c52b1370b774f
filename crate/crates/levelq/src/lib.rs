//! Iterative network quantization for small trainable networks.
//!
//! The pipeline clusters each layer's weights with k-means, ranks clusters
//! (or whole layers) by the loss their quantization would cause, snaps the
//! worst offenders onto their centroids, freezes them behind a gradient
//! mask, and retrains the rest — repeating until every weight sits exactly
//! on a codebook centroid. Three drivers are provided:
//!
//! - **SLQ**: high-bit quantization partitioning clusters within layers.
//! - **ESLQ**: SLQ with type-constrained centroids (powers of two, or
//!   two-significant-figure values) via an L1-regularized k-means.
//! - **MLQ**: ternary quantization that also partitions layers, quantizing
//!   boundary clusters first and heart clusters second.
//!
//! Quantized models serialize to a compact bit-packed codebook format; see
//! [`codec`]. Runnable end-to-end demos live in the `examples/` directory.

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod codec;
pub mod data;
pub mod error;
pub mod layer;
pub mod manifest;
pub mod network;
pub mod partition;
pub mod quantizer;
pub mod tensor;
pub mod train;

pub use error::{LqError, Result};
