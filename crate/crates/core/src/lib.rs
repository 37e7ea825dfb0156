//! Detection of flickering (noise-driven switching between coexisting stable
//! states) in scalar time series, as an early warning signal of tipping
//! points.
//!
//! The crate covers the whole pipeline: stochastic simulation of drift
//! families ([`dynamics`]), rolling statistics and channel assembly
//! ([`features`]), synthetic training data ([`datagen`]), a from-scratch
//! CNN-LSTM classifier ([`neuralnet`]), sliding-window ensemble inference and
//! scalar scores ([`detector`]), ROC evaluation against a variance baseline
//! ([`evaluation`]), empirical record loading ([`ingest`]) and the command
//! line front end ([`cli`]).

// `!(x > 0.0)` style checks are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod datagen;
pub mod detector;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod keyvalue;
pub mod neuralnet;

pub use error::{Error, Result};

/// Version string recorded in every artifact this crate writes.
pub const ARTIFACT_VERSION: &str = concat!("flicker-ews ", env!("CARGO_PKG_VERSION"));

/// Per-trajectory RNG stream: `base + index`, wrapping.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index)
}

pub(crate) fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
