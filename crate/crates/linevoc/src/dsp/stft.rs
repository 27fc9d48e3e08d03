//! Windowed real-DFT analysis as framing plus a matrix product.
//!
//! The transform is deliberately expressed through an explicit cosine/sine
//! basis so the training losses can replay the exact same computation as
//! differentiable graph ops. Frames are centered with reflect padding of
//! `n_fft/2` on both sides, giving `ceil(len / hop)` frames.

use super::{SpectrogramConfig, Spectrogram, Waveform};
use crate::{Error, Result};

/// Precomputed Hann window and real-DFT basis for one configuration.
///
/// `window` has length `n_fft` with the Hann taper of `win_length` samples
/// centered in it (zeros elsewhere). `cos`/`sin` are `[n_fft][bins]`
/// row-major with `cos[j][k] = cos(2 pi j k / n_fft)` and
/// `sin[j][k] = -sin(2 pi j k / n_fft)`, so `re = frames x cos`,
/// `im = frames x sin`.
#[derive(Debug, Clone)]
pub struct DftBasis {
    pub cfg: SpectrogramConfig,
    pub window: Vec<f64>,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl DftBasis {
    pub fn build(cfg: SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let bins = cfg.bins();
        let mut window = vec![0.0f64; n];
        let off = (n - cfg.win_length) / 2;
        for j in 0..cfg.win_length {
            // Periodic Hann.
            let w = 0.5 - 0.5 * (std::f64::consts::TAU * j as f64 / cfg.win_length as f64).cos();
            window[off + j] = w;
        }
        let mut cos = vec![0.0f64; n * bins];
        let mut sin = vec![0.0f64; n * bins];
        for j in 0..n {
            for k in 0..bins {
                let phase = std::f64::consts::TAU * (j * k) as f64 / n as f64;
                cos[j * bins + k] = phase.cos();
                sin[j * bins + k] = -phase.sin();
            }
        }
        Ok(DftBasis {
            cfg,
            window,
            cos,
            sin,
        })
    }
}

/// Reflect `pos` into `[0, len)` without repeating edge samples.
pub(crate) fn reflect_index(mut pos: i64, len: i64) -> i64 {
    if len == 1 {
        return 0;
    }
    loop {
        if pos < 0 {
            pos = -pos;
        } else if pos >= len {
            pos = 2 * (len - 1) - pos;
        } else {
            return pos;
        }
    }
}

/// Magnitude spectrogram of Hann-windowed, reflect-centered frames:
/// `num_frames = ceil(len / hop)`.
pub fn stft(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::Dsp("empty waveform".into()));
    }
    let basis = DftBasis::build(*cfg)?;
    stft_with_basis(w.samples(), &basis)
}

/// Same as [`stft`] but reusing a prebuilt basis.
pub fn stft_with_basis(samples: &[f32], basis: &DftBasis) -> Result<Spectrogram> {
    if samples.is_empty() {
        return Err(Error::Dsp("empty waveform".into()));
    }
    let cfg = &basis.cfg;
    let len = samples.len();
    let n = cfg.n_fft;
    let bins = cfg.bins();
    let frames = len.div_ceil(cfg.hop_length);
    let pad = n / 2;
    let mut mag = vec![0.0f64; frames * bins];
    let mut frame = vec![0.0f64; n];
    for f in 0..frames {
        for (j, slot) in frame.iter_mut().enumerate() {
            let pos = (f * cfg.hop_length + j) as i64 - pad as i64;
            let src = reflect_index(pos, len as i64) as usize;
            *slot = samples[src] as f64 * basis.window[j];
        }
        let out = &mut mag[f * bins..(f + 1) * bins];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut re = 0.0f64;
            let mut im = 0.0f64;
            for (j, &x) in frame.iter().enumerate() {
                re += x * basis.cos[j * bins + k];
                im += x * basis.sin[j * bins + k];
            }
            *slot = (re * re + im * im).sqrt();
        }
    }
    Ok(Spectrogram::from_rows(mag, frames, bins))
}
