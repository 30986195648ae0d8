//! Deepfake image classification toolkit: error level analysis, a
//! shifted-window transformer, lite CNN baselines, cross-attention fusion and
//! KNN-on-features, all running on a small reverse-mode autodiff core.

#![allow(
    clippy::should_implement_trait,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity,
    clippy::large_enum_variant
)]
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod ela;
pub mod error;
pub mod imaging;
pub mod jpeg;
pub mod knn;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
