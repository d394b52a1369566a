//! Dynamic multi-modal training: modality-specific encoders learn from
//! unpaired data with their own labels while a unified classifier learns from
//! the concatenated features of paired samples.

pub mod diffcore;
pub mod encoders;
mod error;
pub mod ingest;

pub use error::{Error, Result};
pub mod datagen;
pub mod evalkit;
pub mod trainer;
pub mod pipeline;
