//! Micro-Doppler rotorcraft classification pipeline.
//!
//! IQ samples pass through a clutter highpass, a modified dual-tree complex
//! wavelet denoiser and an STFT; the resulting spectrograms, padded to a
//! common canvas, are classified by a small Vision Transformer whose padded
//! patches are masked out of attention.

pub mod dsp;
pub mod error;
pub mod formats;
pub mod iqsim;
pub mod mdtcwt;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
