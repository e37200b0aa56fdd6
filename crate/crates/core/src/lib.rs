//! Conditional Wasserstein auto-encoders for individual musical note samples.
//!
//! The pipeline runs from tagged note libraries ([`corpus`]) through Mel-spectrogram
//! preprocessing ([`spectral`]) into a FiLM/AdaIN-conditioned auto-encoder with an
//! adversarial Fader latent discriminator ([`model`], [`objectives`], [`training`]).
//! Generated spectrograms are rendered back to audio with Griffin-Lim or a
//! multi-head convolutional vocoder ([`vocoder`]).

pub mod checkpoint;
pub mod corpus;
mod error;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod spectral;
pub mod training;
pub mod vocoder;

pub use error::{Error, Result};

/// Sample rate every note is resampled to.
pub const SAMPLE_RATE: u32 = 22050;
/// Fixed note length in samples (about 1.6 s at 22050 Hz).
pub const NOTE_LENGTH: usize = 34560;
pub const FFT_SIZE: usize = 2048;
pub const HOP_SIZE: usize = 256;
/// Linear-frequency bins of a 2048-point real FFT.
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
/// STFT frames of a [`NOTE_LENGTH`] clip without padding.
pub const N_FRAMES: usize = (NOTE_LENGTH - FFT_SIZE) / HOP_SIZE + 1;
pub const N_MELS: usize = 500;
pub const N_SEMITONES: usize = 12;
pub const N_OCTAVES: usize = 9;
pub const LATENT_DIM: usize = 3;
