//! Learned information gates.
//!
//! A gating network produces per-pixel (or per-feature) values in `(0, 1)`
//! that blend an observation with Gaussian noise. Trained jointly with a
//! downstream objective and an L1 sparsity penalty, the gates learn which
//! parts of the input the objective actually needs.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: reverse-mode differentiation, Adam, gradient checks
//! - [`nets`]: mask UNet, convolutional encoder, small heads
//! - [`worldgen`]: the DistractorDot environment and offline datasets
//! - [`gating`]: noise, gate application, penalties, schedules
//! - [`objectives`]: contrastive, TD, behavior-cloning and SimSiam losses
//! - [`trainer`]: cooperative/adversarial loops, probes, mask reports
//! - [`cli`]: run configuration, artifact writers and the command runner

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod gating;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
