//! RIFF/WAVE I/O, PCM 16-bit mono only.

use std::io::{Read, Write};
use std::path::Path;

use super::Waveform;
use crate::{Error, Result};

/// Write a waveform as 16-bit PCM mono. Samples are clamped to [-1, 1] and
/// quantized with `round(x * 32768)` clamped to the i16 range, which bounds
/// the round-trip error by one quantization step (1/32768).
pub fn wav_write(w: &Waveform, path: &Path) -> Result<()> {
    let n = w.len() as u32;
    let sr = w.sample_rate();
    let data_bytes = n * 2;
    let mut out = Vec::with_capacity(44 + data_bytes as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sr.to_le_bytes());
    out.extend_from_slice(&(sr * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in w.samples() {
        let clamped = s.clamp(-1.0, 1.0);
        let q = (clamped as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Read a 16-bit PCM mono WAV file. Samples are scaled by 1/32768.
pub fn wav_read(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("malformed header: not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes([
            bytes[pos + 4],
            bytes[pos + 5],
            bytes[pos + 6],
            bytes[pos + 7],
        ]) as usize;
        let body_start = pos + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(Error::Wav(format!(
                "chunk {} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Wav("fmt chunk too short".into()));
                }
                let b = &bytes[body_start..];
                fmt = Some((
                    u16::from_le_bytes([b[0], b[1]]),
                    u16::from_le_bytes([b[2], b[3]]),
                    u32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                    u16::from_le_bytes([b[14], b[15]]),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| Error::Wav("missing fmt chunk".into()))?;
    if format != 1 {
        return Err(Error::Wav(format!("unsupported encoding: format {format}")));
    }
    if channels != 1 {
        return Err(Error::Wav(format!(
            "unsupported channel count: {channels}"
        )));
    }
    if bits != 16 {
        return Err(Error::Wav(format!("unsupported bit depth: {bits}")));
    }
    let data = data.ok_or_else(|| Error::Wav("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::Wav("data chunk has odd byte length".into()));
    }
    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Waveform::new(samples, rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("{}_{}", name, std::process::id()))
    }

    #[test]
    fn ramp_roundtrip_is_within_one_quantization_step() {
        let n = 4096;
        let samples: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / (n - 1) as f32).collect();
        let w = Waveform::new(samples.clone(), SAMPLE_RATE).unwrap();
        let path = tmp("ramp.wav");
        wav_write(&w, &path).unwrap();
        let back = wav_read(&path).unwrap();
        assert_eq!(back.len(), n);
        assert_eq!(back.sample_rate(), SAMPLE_RATE);
        let max_err = samples
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 32768.0, "max err {max_err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn one_second_has_expected_sizes() {
        let w = Waveform::new(vec![0.25; 22050], SAMPLE_RATE).unwrap();
        let path = tmp("second.wav");
        wav_write(&w, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 44 + 44100);
        let data_size = u32::from_le_bytes([bytes[40], bytes[41], bytes[42], bytes[43]]);
        assert_eq!(data_size, 44100);
        assert_eq!(wav_read(&path).unwrap().len(), 22050);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn stereo_is_rejected() {
        // Hand-build a 2-channel header.
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36u32 + 8).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes()); // stereo
        out.extend_from_slice(&22050u32.to_le_bytes());
        out.extend_from_slice(&(22050u32 * 4).to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&8u32.to_le_bytes());
        out.extend_from_slice(&[0u8; 8]);
        let path = tmp("stereo.wav");
        std::fs::write(&path, &out).unwrap();
        let err = wav_read(&path).unwrap_err();
        assert!(
            err.to_string().contains("unsupported channel count"),
            "got: {err}"
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_header_is_rejected() {
        let path = tmp("garbage.wav");
        std::fs::write(&path, b"definitely not a wav file").unwrap();
        assert!(wav_read(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn out_of_range_samples_are_clamped_not_wrapped() {
        let w = Waveform::new(vec![1.5, -1.5, 0.0], SAMPLE_RATE).unwrap();
        let path = tmp("clip.wav");
        wav_write(&w, &path).unwrap();
        let back = wav_read(&path).unwrap();
        assert!((back.samples()[0] - 32767.0 / 32768.0).abs() < 1e-6);
        assert!((back.samples()[1] + 1.0).abs() < 1e-6);
        std::fs::remove_file(&path).ok();
    }
}
