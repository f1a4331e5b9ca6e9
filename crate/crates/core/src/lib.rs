//! Image-instruction adapter for multi-modal diffusion transformers.
//!
//! An MM-DiT backbone generates images from text; a parallel adapter stack
//! lets a task instruction and a condition image attend to each other and
//! injects their keys/values into every backbone block through
//! RoPE-enhanced cross-attention. Everything runs on the small tensor and
//! autodiff engine in [`numerics`].

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sampling;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
