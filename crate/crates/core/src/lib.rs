//! Sparse depth completion guided by a two-dimensional canonical
//! correlation objective between depth and RGB bottleneck features.
//!
//! Modules, bottom-up:
//!
//! - [`depth_io`], [`mask`]: images, depth maps, masks and their file formats.
//! - [`sparsify`]: uniform, stereo-like and FAST-corner sampling of depth.
//! - [`diffcore`]: feature grids, sparsity-aware convolution and a small
//!   reverse-mode tape.
//! - [`cca2d`]: the correlation objective and its closed-form gradient.
//! - [`model`], [`train`]: the completion network and its SGD loop.
//! - [`metrics`]: RMSE / MAE / δ-accuracy evaluation.
//! - [`gradcheck`]: finite-difference verification used by the CLI.

pub mod cca2d;
pub mod depth_io;
pub mod diffcore;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod sparsify;
pub mod train;

pub use error::{Error, Result};
