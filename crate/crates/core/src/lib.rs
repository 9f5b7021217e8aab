//! Patch-aware vector-quantized autoencoder for one-class defect detection.
//!
//! Images are encoded into a multi-resolution feature hierarchy; a gate picks, per coarse cell,
//! which resolution of discrete codes to spend, trading reconstruction against a budget that is
//! discounted in context-rich regions. A masked-token transformer learns the budgets normal
//! images use, and defects are scored where the observed budget deviates from that prior and the
//! reconstruction fails.

pub mod backbone;
pub mod budget;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod prior;
pub mod routing;
pub mod scoring;

pub use error::{PvqaeError, Result};
