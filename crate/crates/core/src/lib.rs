//! Additive prompt tuning for class-incremental learning on a frozen vision
//! transformer.
//!
//! The crate bundles a small reverse-mode tensor engine, a pre-norm ViT,
//! the prompt mechanisms (additive key/value prompts with progressive
//! fusion, plus concatenation and prompt-pool baselines), a synthetic data
//! generator, the incremental training harness, metrics and an analytic
//! cost model.

pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod harness;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod prompt;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
