//! Data-shift diagnostics for multichannel EEG classifiers.
//!
//! Recordings are preprocessed into fixed-length epochs, perturbed by
//! band-pass, quantization and noise shifts, and embedded by either a
//! power-spectral encoder or a small convolutional network. Each shift is then
//! scored two ways: downstream performance with Monte Carlo dropout
//! uncertainty ([`uncertainty`], [`metrics`]) and latent integrity, the
//! fraction of Gabriel graph edges that join clean to shifted
//! embeddings ([`topology`]).
//!
//! Work is spread over a rayon pool with the default `parallel` feature;
//! results do not depend on the worker count. See [`par`].

pub mod config;
pub mod encoders;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod shifts;
pub mod signal;
pub mod synth;
pub mod topology;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
