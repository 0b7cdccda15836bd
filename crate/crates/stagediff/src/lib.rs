//! Desk-scale stage-aware diffusion training.
//!
//! A toy conditional diffusion model whose training recipe is modulated by a
//! semantic-progress regime variable: decayed SSL guidance, self-adaptive
//! timestep sampling, and structure-aware regularization, all driven by the
//! slope of a frozen-encoder discrepancy.

pub mod autodiff;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod sampler;
pub mod ssl;
pub mod structure;

pub use error::{Error, Result};
