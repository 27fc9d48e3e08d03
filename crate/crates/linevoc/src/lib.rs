//! A desk-scale neural vocoder built around a straight-line diffusion path.
//!
//! The crate trains a patch-token Transformer to predict clean audio from a
//! linear interpolation between Gaussian noise and the target waveform, then
//! synthesizes with an N-step Euler solver along the same straight path.
//! Training optionally adds a three-discriminator adversarial stage.
//!
//! Module map:
//!
//! - [`grad`] — minimal reverse-mode autodiff over shaped arrays, with a
//!   finite-difference checker and a named-parameter checkpoint container.
//! - [`dsp`] — framing, windowed DFT analysis, mel filterbank, WAV I/O.
//! - [`diffusion`] — the interpolation path, Euler sampler, and training-pair
//!   construction.
//! - [`denoiser`] — the patch-token Transformer with step-adaptive layer norm
//!   and a location-variable post-convolution stack.
//! - [`critic`] — spectral, multi-scale, and multi-period discriminators.
//! - [`loss`] — diffusion, multi-configuration STFT, and least-squares
//!   adversarial losses.
//! - [`train`] — the three-stage training loop, Adam, synthetic dataset, and
//!   checkpoint/resume.
//! - [`metrics`] — MCD, V/UV error, F0 correlation, NDB/JSD, and an RTF
//!   timing harness.

pub mod config;
pub mod critic;
pub mod denoiser;
pub mod diffusion;
pub mod dsp;
pub mod grad;
pub mod loss;
pub mod metrics;
pub mod rng;
pub mod train;
pub mod verify;

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed or unsupported WAV data.
    Wav(String),
    /// Invalid signal-processing input (empty waveform, bad config, ...).
    Dsp(String),
    /// Shape or dimension mismatch in numeric code.
    Shape(String),
    /// Invalid configuration value.
    Config(String),
    /// Training aborted or could not proceed.
    Train(String),
    /// Checkpoint container could not be read or written.
    Checkpoint(String),
    /// Metric preconditions violated.
    Metrics(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Wav(m) => write!(f, "wav error: {m}"),
            Error::Dsp(m) => write!(f, "dsp error: {m}"),
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Train(m) => write!(f, "train error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Metrics(m) => write!(f, "metrics error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
