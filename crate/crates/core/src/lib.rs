//! Cross-view online clustering of token features.
//!
//! - [`features`]: token matrices, attention marginals, crop geometry and the
//!   join/split plumbing between views and the joint token space.
//! - [`sinkhorn`]: log-domain entropic optimal transport.
//! - [`cluster`]: the iterative transport/merge clustering loop, positional
//!   bias, pruning and multi-head runs.
//! - [`distill`]: centroid pooling and the self-distillation losses.
//! - [`segeval`]: k-means, Hungarian matching and mIoU scoring.
//! - [`io`], [`config`]: binary file formats, geometry sidecars and run
//!   configuration.
//! - [`synth`]: synthetic view pairs with known labels.

pub mod cluster;
pub mod config;
pub mod distill;
pub mod error;
pub mod features;
pub mod io;
pub mod segeval;
pub mod sinkhorn;
pub mod synth;

pub use error::{Error, Result};
