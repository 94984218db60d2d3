//! Two-stage audio-visual target speech extraction at desk scale.
//!
//! An audio-dominant separator produces a preliminary estimate of the target
//! speaker's waveform from a two-speaker mixture conditioned on lip-movement
//! embeddings; a visual-dominant synthesizer then predicts a residual waveform
//! from the estimate's mel spectrogram and the same lip embeddings. Training
//! couples both stages with SI-SNR losses and a contrastive semantic matching
//! loss over frozen audio/video front-end embeddings.

pub mod ablate;
pub mod chain;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frontends;
pub mod fusion;
pub mod losses;
pub mod params;
pub mod separator;
pub mod signal;
pub mod synthesizer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
