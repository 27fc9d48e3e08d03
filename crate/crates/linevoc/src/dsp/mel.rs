//! 80-band mel conditioning features.
//!
//! Mel scale is the HTK convention `m = 2595 log10(1 + f/700)` with
//! unnormalized triangular filters peaking at 1. Conditioning frames use the
//! fixed 256-sample hop so `num_frames = len / 256` exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::stft::stft_with_basis;
use super::{DftBasis, MelCondition, SpectrogramConfig, Waveform, HOP};
use crate::{Error, Result};

/// Number of mel bands used everywhere in the pipeline.
pub const N_MELS: usize = 80;

/// Floor added before the log so silence maps to `ln(1e-5)`.
pub const LOG_FLOOR: f64 = 1e-5;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank `[n_mels][n_fft/2 + 1]`, row-major.
///
/// Filter centers are equally spaced on the mel scale from 0 Hz to Nyquist;
/// weights are evaluated at the continuous bin frequencies, so every row has
/// a single triangular peak and adjacent filters overlap.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Result<Vec<f64>> {
    if n_mels == 0 {
        return Err(Error::Dsp("n_mels must be >= 1".into()));
    }
    let bins = n_fft / 2 + 1;
    if n_mels > bins {
        return Err(Error::Dsp(format!(
            "n_mels {n_mels} larger than available bins {bins}"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    // n_mels + 2 edge points on the mel scale.
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0f64; n_mels * bins];
    let bin_hz = sample_rate as f64 / n_fft as f64;
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (k, slot) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > lo && f < hi {
                *slot = if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
            }
        }
    }
    Ok(fb)
}

/// Log-mel conditioning: `ln(filterbank x magnitude + 1e-5)` with the fixed
/// 1024/1024/256 analysis, so the frame count is exactly `len / 256`.
pub fn mel_condition(w: &Waveform) -> Result<MelCondition> {
    if w.len() % HOP != 0 {
        return Err(Error::Dsp(format!(
            "waveform length {} is not a multiple of {HOP}",
            w.len()
        )));
    }
    let cfg = SpectrogramConfig::mel_analysis();
    let basis = DftBasis::build(cfg)?;
    let spec = stft_with_basis(w.samples(), &basis)?;
    debug_assert_eq!(spec.num_frames(), w.len() / HOP);
    let fb = mel_filterbank(N_MELS, cfg.n_fft, w.sample_rate())?;
    let bins = cfg.bins();
    let mut frames = vec![0.0f32; spec.num_frames() * N_MELS];
    for f in 0..spec.num_frames() {
        let mag = spec.frame(f);
        let out = &mut frames[f * N_MELS..(f + 1) * N_MELS];
        for (m, slot) in out.iter_mut().enumerate() {
            let row = &fb[m * bins..(m + 1) * bins];
            let mut acc = 0.0f64;
            for (w, &x) in row.iter().zip(mag) {
                acc += w * x;
            }
            *slot = (acc + LOG_FLOOR).ln() as f32;
        }
    }
    MelCondition::from_rows(frames, spec.num_frames(), w.sample_rate())
}

/// Export a mel condition as a one-line ASCII header `num_frames n_mels`
/// followed by a flat little-endian f32 blob.
pub fn write_mel_blob(mel: &MelCondition, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{} {}", mel.num_frames(), mel.n_mels())?;
    let mut bytes = Vec::with_capacity(mel.data().len() * 4);
    for &v in mel.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Read back a mel blob written by [`write_mel_blob`].
pub fn read_mel_blob(path: &Path, sample_rate: u32) -> Result<MelCondition> {
    let f = std::fs::File::open(path)?;
    let mut reader = BufReader::new(f);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let mut parts = header.split_whitespace();
    let num_frames: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Dsp("mel blob header missing num_frames".into()))?;
    let n_mels: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Dsp("mel blob header missing n_mels".into()))?;
    if n_mels != N_MELS {
        return Err(Error::Dsp(format!(
            "mel blob has {n_mels} bands, expected {N_MELS}"
        )));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() != num_frames * n_mels * 4 {
        return Err(Error::Dsp(format!(
            "mel blob payload is {} bytes, expected {}",
            bytes.len(),
            num_frames * n_mels * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    MelCondition::from_rows(data, num_frames, sample_rate)
}
