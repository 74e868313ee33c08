//! Embedding-space diffusion for discrete sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedules`]: noise schedules `(ᾱ_t, β̄_t)`, noise rescaling and
//!   timestep subsampling.
//! - [`embeddings`]: the token embedding table with its tied rounding head.
//! - [`degeneration`]: the context-free degenerated classifier, Monte-Carlo
//!   degeneration scores and the rescaling-factor search.
//! - [`diffusion`]: forward sampling, the closed-form posterior and the
//!   training losses.
//! - [`denoiser`]: a small encoder/denoiser network with hand-written
//!   gradients, the synthetic tasks and the training loop.
//! - [`decoding`]: subsampled reverse generation, 2D parallel decoding,
//!   MBR selection and evaluation metrics.
//! - [`checkpoint`] and [`config`]: persistence and configuration files.
//!
//! All randomness flows through [`rng`], which derives an independent
//! stream for every `(seed, purpose, indices...)` key so results do not
//! depend on evaluation order or the number of worker threads.

// `!(x > 0.0)` is how argument checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod decoding;
pub mod degeneration;
pub mod denoiser;
pub mod diffusion;
pub mod embeddings;
mod error;
pub mod rng;
pub mod schedules;

pub use error::{Error, Result};
