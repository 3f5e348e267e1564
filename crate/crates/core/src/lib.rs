//! Unsupervised discovery of interpretable directions in the bottleneck
//! ("h-space") of a small diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`] and [`memory`]: dense tensors, a reverse-mode
//!   tape with a vector-Jacobian-product entry point, and live-buffer
//!   accounting.
//! - [`diffusion`]: noise schedules, forward noising, DDIM stepping and
//!   inversion.
//! - [`denoiser`]: the time-conditioned noise predictor with a replaceable
//!   bottleneck.
//! - [`discovery`]: shift block, discriminator, reconstructor and losses.
//! - [`chain`]: recording the shifted reverse chain and back-propagating
//!   through it node by node, plus the full-graph reference.
//! - [`experiments`]: toy data, pretraining, the discovery loop, metrics and
//!   the memory/throughput benchmark.
//! - [`io`] and [`config`]: checkpoint, config and PGM formats, and run
//!   settings.

pub mod autodiff;
pub mod chain;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod discovery;
pub mod error;
pub mod experiments;
pub mod io;
pub mod memory;
pub mod nn;
pub mod tensor;

pub use autodiff::{Param, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
