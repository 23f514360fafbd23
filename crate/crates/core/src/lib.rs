//! Data-free knowledge distillation for diffusion models, at desk scale.
//!
//! A teacher denoiser trained on procedurally generated data is distilled
//! into a student of any architecture without touching the data again:
//! the teacher's own reverse chain supplies the noisy inputs, and its
//! predictions supply the targets.

pub mod data;
pub mod diffusion;
pub mod distill;
pub mod engine;
pub mod error;
pub mod harness;
pub mod models;
pub mod rng;

pub use error::{Error, Result};
