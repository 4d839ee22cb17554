//! Dissect a trained ConvNet into per-class channel importances and
//! reconstruct cheap sub-networks for arbitrary class subsets.

pub mod analysis;
pub mod config;
pub mod dissect;
pub mod error;
pub mod formats;
pub mod infer;
pub mod mnist;
pub mod model;
pub mod pipeline;
pub mod reconstruct;
pub mod tensor;
pub mod train;

pub use error::{DrnetError, Result};
pub use mnist::Dataset;
pub use model::{Architecture, GatedNetwork, LayerSpec};
pub use tensor::Tensor;
