//! Minimal reverse-mode differentiation over 3D feature grids.
//!
//! The op set is exactly what the completion network needs: sparsity-aware
//! convolution, mask dilation, 2x2 downsampling, ReLU, stride-2 transposed
//! convolution, channel concatenation and a few scalar losses. Parameters
//! are plain buffers in a [`ParamSet`]; SGD is [`sgd_step`].

pub mod checkpoint;
mod graph;
mod grid;
pub mod kernels;
mod params;

pub use graph::{mask_maxpool, mask_orpool2, Graph, NodeId, Reduction};
pub use grid::FeatureGrid;
pub use params::{sgd_step, sgd_step_filtered, ConvLayer, LayerId, ParamSet};
pub(crate) use params::standard_normal;
