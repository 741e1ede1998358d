//! Noise-conditional variational score distillation at desk scale.
//!
//! The crate trains *generative denoisers*: conditional generators that draw
//! from the denoising posterior `q(x0 | y_sigma)` at any noise level. Around
//! them sit a multi-step sampler whose intermediate marginals are exact, and a
//! split-Gibbs plug-and-play sampler for posteriors of the form
//! `q_data(x0) * exp(-E(x0) / beta)`.
//!
//! Everything is checked against Gaussian mixtures, for which scores,
//! denoising posteriors and linear-inverse posteriors are available in closed
//! form ([`gmm`]). The crate is `no_std` (with `alloc`); the `parallel`
//! feature enables batch-level map-reduce over rayon without changing any
//! numerical result.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod batch;
pub mod error;
pub mod gmm;
pub mod linalg;
pub mod nn;
pub mod noise;
pub mod pnp;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod verify;

mod par;

pub use batch::{Provenance, SampleBatch};
pub use error::{Error, Result};
pub use gmm::GaussianMixture;
pub use noise::{NoiseLevel, NoisyObservation};
