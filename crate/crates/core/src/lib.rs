//! Two-view image classification with convolutional block attention.
//!
//! The crate covers the whole experiment lifecycle: patch datasets (with a
//! synthetic paired-view generator), residual backbones with attention blocks,
//! late-fusion multi-view models, training with checkpoints and gradient
//! checks, and evaluation (metrics, embeddings, 3-D projection, cluster
//! statistics).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; gradient verification runs in `f64`. Aliases for both are exported
//! at the crate root.

pub mod attention;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod nn;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CbamBlockF32 = attention::CbamBlock<f32>;
pub type CbamBlockF64 = attention::CbamBlock<f64>;
pub type SingleViewModelF32 = backbone::SingleViewModel<f32>;
pub type SingleViewModelF64 = backbone::SingleViewModel<f64>;
pub type MultiViewModelF32 = fusion::MultiViewModel<f32>;
pub type MultiViewModelF64 = fusion::MultiViewModel<f64>;
