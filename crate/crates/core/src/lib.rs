//! Discrete-code speech synthesis.
//!
//! A waveform quantizer maps audio to a grid of codes drawn from several
//! independent codebooks; a transformer models the code grid autoregressively
//! given phonemes and a speaker vector; inference decodes with nucleus
//! sampling under a monotonic attention window and turns codes back into
//! audio. Objective metrics (MCD, Fréchet distance, speaker similarity,
//! WADA-SNR, pitch) live in [`metrics`].

pub mod audio;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod persist;
pub mod quantizer;
pub mod synthesizer;

pub use error::{Error, Result};
