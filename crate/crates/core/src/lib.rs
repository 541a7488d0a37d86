//! Gated prompt tuning for vision transformers.
//!
//! A small dense-tensor autodiff core drives a minimal ViT backbone, three
//! prompt-tuning variants (shallow, deep and gated prompts), learnable
//! per-block attention temperatures, and the analysis tools that turn learned
//! gates into per-block selection ratios.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`gradcheck`]: numerical core
//! - [`vit`]: backbone, parameters, checkpoints
//! - [`prompt`]: prompt variants, gates, temperatures, freezing contract
//! - [`analysis`]: accumulated gate weights, selection ratios, attention exports
//! - [`train`]: SGD loop, evaluation, ablation grid
//! - [`data`]: datasets, file format, synthetic depth-selective task

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod prompt;
pub mod tensor;
pub mod train;
pub mod util;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
