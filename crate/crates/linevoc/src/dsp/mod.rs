//! Deterministic signal-processing primitives shared by conditioning,
//! losses, and metrics: framing, windowed Fourier analysis, the mel
//! filterbank, and waveform file I/O.
//!
//! Everything here is a pure function of its inputs; analysis runs in f64
//! internally regardless of the training precision.

mod mel;
mod stft;
pub mod wav;

pub use mel::{mel_condition, mel_filterbank, read_mel_blob, write_mel_blob, N_MELS};
pub use stft::{stft, DftBasis};

use crate::{Error, Result};

/// Samples-per-frame alignment the whole pipeline is built around: one mel
/// frame conditions exactly this many waveform samples.
pub const HOP: usize = 256;

/// Default sample rate in Hz.
pub const SAMPLE_RATE: u32 = 22050;

/// A mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    /// Wrap samples, rejecting empty or non-finite input.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dsp("empty waveform".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Dsp("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Windowed-DFT analysis settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectrogramConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
}

impl SpectrogramConfig {
    pub fn new(n_fft: usize, win_length: usize, hop_length: usize) -> Result<Self> {
        let cfg = SpectrogramConfig {
            n_fft,
            win_length,
            hop_length,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 {
            return Err(Error::Dsp("hop_length must be >= 1".into()));
        }
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::Dsp(format!(
                "n_fft must be even and >= 2, got {}",
                self.n_fft
            )));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::Dsp(format!(
                "win_length {} must be in [1, n_fft={}]",
                self.win_length, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// The analysis config behind mel conditioning: 1024-point transform,
    /// full-length Hann window, 256-sample hop.
    pub fn mel_analysis() -> Self {
        SpectrogramConfig {
            n_fft: 1024,
            win_length: 1024,
            hop_length: HOP,
        }
    }
}

/// Magnitude spectrogram, one row per frame.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// Row-major `[num_frames][bins]`, all entries >= 0.
    magnitude: Vec<f64>,
    num_frames: usize,
    bins: usize,
}

impl Spectrogram {
    pub(crate) fn from_rows(magnitude: Vec<f64>, num_frames: usize, bins: usize) -> Self {
        debug_assert_eq!(magnitude.len(), num_frames * bins);
        Spectrogram {
            magnitude,
            num_frames,
            bins,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.magnitude[f * self.bins..(f + 1) * self.bins]
    }

    pub fn data(&self) -> &[f64] {
        &self.magnitude
    }
}

/// 80-band log-mel conditioning sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MelCondition {
    /// Row-major `[num_frames][N_MELS]`.
    frames: Vec<f32>,
    num_frames: usize,
    sample_rate: u32,
}

impl MelCondition {
    pub fn from_rows(frames: Vec<f32>, num_frames: usize, sample_rate: u32) -> Result<Self> {
        if num_frames == 0 || frames.len() != num_frames * N_MELS {
            return Err(Error::Dsp(format!(
                "mel condition expects {num_frames} x {N_MELS} values, got {}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dsp("non-finite mel value".into()));
        }
        Ok(MelCondition {
            frames,
            num_frames,
            sample_rate,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn n_mels(&self) -> usize {
        N_MELS
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        &self.frames[f * N_MELS..(f + 1) * N_MELS]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    /// Contiguous sub-range of frames (used for training crops).
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<MelCondition> {
        if start + len > self.num_frames || len == 0 {
            return Err(Error::Dsp(format!(
                "frame slice [{start}, {}) out of range for {} frames",
                start + len,
                self.num_frames
            )));
        }
        MelCondition::from_rows(
            self.frames[start * N_MELS..(start + len) * N_MELS].to_vec(),
            len,
            self.sample_rate,
        )
    }
}
