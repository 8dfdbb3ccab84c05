//! Visual tokenizer pre-training.
//!
//! A ViT autoencoder trained jointly with image-text contrastive,
//! self-distillation/masked-image-modeling and reconstruction objectives,
//! plus the evaluation harness (reconstruction, linear probe, zero-shot,
//! downstream latent generation) and the scaling-sweep orchestration.

pub mod archive;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod genharness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sweep;
pub mod trainer;

pub use error::{Error, Result};
