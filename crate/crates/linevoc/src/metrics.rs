//! Objective evaluation: mel-cepstral distortion, voicing error, F0
//! correlation, bin-occupancy diversity (NDB / Jensen-Shannon divergence),
//! and a real-time-factor timing harness.
//!
//! Generated and reference audio share the same mel condition and length, so
//! frames align by construction and no time warping is applied anywhere.

use std::time::Instant;

use crate::diffusion::{sample, Predictor};
use crate::dsp::{mel_condition, MelCondition, Waveform, HOP};
use crate::grad::Scalar;
use crate::rng::Rng;
use crate::{Error, Result};

/// Analysis window for pitch tracking (samples).
const F0_FRAME: usize = 1024;
/// Search range in Hz and the voicing decision threshold on the normalized
/// autocorrelation peak.
const F0_MIN: f64 = 50.0;
const F0_MAX: f64 = 500.0;
const VOICING_THRESHOLD: f64 = 0.3;

/// Number of cepstral coefficients compared by the distortion metric
/// (coefficients 1..=13; the energy term c0 is excluded).
pub const MCD_COEFFS: usize = 13;

/// Per-frame fundamental-frequency track at a 256-sample hop.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    /// Hz per frame, 0.0 where unvoiced.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl F0Track {
    pub fn num_frames(&self) -> usize {
        self.f0.len()
    }
}

/// Normalized-autocorrelation pitch tracker with parabolic peak refinement.
pub fn extract_f0(w: &Waveform) -> Result<F0Track> {
    if w.len() < F0_FRAME {
        return Err(Error::Metrics(format!(
            "waveform of {} samples shorter than one {F0_FRAME}-sample frame",
            w.len()
        )));
    }
    let sr = w.sample_rate() as f64;
    let lag_min = (sr / F0_MAX).floor() as usize;
    let lag_max = (sr / F0_MIN).ceil() as usize;
    debug_assert!(lag_max + 1 < F0_FRAME);
    let num_frames = (w.len() - F0_FRAME) / HOP + 1;
    let mut f0 = Vec::with_capacity(num_frames);
    let mut voiced = Vec::with_capacity(num_frames);
    let samples = w.samples();
    let mut r = vec![0.0f64; lag_max + 2];
    for fi in 0..num_frames {
        let frame = &samples[fi * HOP..fi * HOP + F0_FRAME];
        let energy: f64 = frame.iter().map(|&x| (x as f64) * (x as f64)).sum();
        if energy < 1e-8 {
            f0.push(0.0);
            voiced.push(false);
            continue;
        }
        for (lag, slot) in r.iter_mut().enumerate().take(lag_max + 2).skip(lag_min - 1) {
            *slot = normalized_autocorr(frame, lag);
        }
        // Local maxima inside the search range.
        let mut peaks: Vec<(usize, f64)> = Vec::new();
        let mut best = 0.0f64;
        for lag in lag_min..=lag_max {
            if r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1] {
                peaks.push((lag, r[lag]));
                best = best.max(r[lag]);
            }
        }
        if best < VOICING_THRESHOLD {
            f0.push(0.0);
            voiced.push(false);
            continue;
        }
        // Smallest lag whose peak is close to the best one, so a perfectly
        // periodic signal resolves to its fundamental rather than a
        // subharmonic at twice the period.
        let floor = (0.85 * best).max(VOICING_THRESHOLD);
        let (lag, _) = peaks
            .iter()
            .find(|(_, v)| *v >= floor)
            .copied()
            .expect("at least the best peak qualifies");
        let refined = parabolic_refine(lag as f64, r[lag - 1], r[lag], r[lag + 1]);
        let hz = (sr / refined).clamp(F0_MIN, F0_MAX);
        f0.push(hz);
        voiced.push(true);
    }
    Ok(F0Track { f0, voiced })
}

fn normalized_autocorr(frame: &[f32], lag: usize) -> f64 {
    let n = frame.len() - lag;
    let mut cross = 0.0f64;
    let mut e0 = 0.0f64;
    let mut e1 = 0.0f64;
    for i in 0..n {
        let a = frame[i] as f64;
        let b = frame[i + lag] as f64;
        cross += a * b;
        e0 += a * a;
        e1 += b * b;
    }
    let denom = (e0 * e1).sqrt();
    if denom < 1e-12 {
        0.0
    } else {
        cross / denom
    }
}

/// Parabolic interpolation of a peak at integer position `x` with neighbor
/// values `(ym, y0, yp)`.
fn parabolic_refine(x: f64, ym: f64, y0: f64, yp: f64) -> f64 {
    let denom = ym - 2.0 * y0 + yp;
    if denom.abs() < 1e-12 {
        x
    } else {
        x + 0.5 * (ym - yp) / denom
    }
}

/// Orthonormal DCT-II cepstra of the log-mel rows, coefficients 1..=13.
pub fn mel_cepstra(mel: &MelCondition) -> Vec<[f64; MCD_COEFFS]> {
    let n = mel.n_mels();
    let scale = (2.0 / n as f64).sqrt();
    (0..mel.num_frames())
        .map(|f| {
            let row = mel.frame(f);
            let mut c = [0.0f64; MCD_COEFFS];
            for (ki, slot) in c.iter_mut().enumerate() {
                let k = (ki + 1) as f64;
                let mut acc = 0.0f64;
                for (j, &x) in row.iter().enumerate() {
                    acc += x as f64
                        * (std::f64::consts::PI * k * (2.0 * j as f64 + 1.0) / (2.0 * n as f64))
                            .cos();
                }
                *slot = scale * acc;
            }
            c
        })
        .collect()
}

/// Distortion in dB between two equal-length cepstral sequences:
/// mean over frames of `(10/ln10) * sqrt(2 * sum((ca - cb)^2))`.
pub fn mcd_from_cepstra(a: &[[f64; MCD_COEFFS]], b: &[[f64; MCD_COEFFS]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Metrics(format!(
            "cepstra frame counts differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let factor = 10.0 / std::f64::consts::LN_10;
    let mut acc = 0.0f64;
    for (ca, cb) in a.iter().zip(b) {
        let d2: f64 = ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum();
        acc += factor * (2.0 * d2).sqrt();
    }
    Ok(acc / a.len() as f64)
}

/// Mel-cepstral distortion between two time-aligned waveforms.
pub fn mcd(w_a: &Waveform, w_b: &Waveform) -> Result<f64> {
    if w_a.len() != w_b.len() {
        return Err(Error::Metrics(format!(
            "waveform lengths differ: {} vs {}",
            w_a.len(),
            w_b.len()
        )));
    }
    let ca = mel_cepstra(&mel_condition(w_a)?);
    let cb = mel_cepstra(&mel_condition(w_b)?);
    mcd_from_cepstra(&ca, &cb)
}

/// Fraction of frames whose voicing flags disagree.
pub fn vuv_error(a: &F0Track, b: &F0Track) -> Result<f64> {
    if a.num_frames() != b.num_frames() || a.num_frames() == 0 {
        return Err(Error::Metrics(format!(
            "voicing frame counts differ: {} vs {}",
            a.num_frames(),
            b.num_frames()
        )));
    }
    let mism = a
        .voiced
        .iter()
        .zip(&b.voiced)
        .filter(|(x, y)| x != y)
        .count();
    Ok(mism as f64 / a.num_frames() as f64)
}

/// Pearson correlation of F0 over frames voiced in both tracks.
pub fn f0_corr(a: &F0Track, b: &F0Track) -> Result<f64> {
    if a.num_frames() != b.num_frames() {
        return Err(Error::Metrics("frame counts differ".into()));
    }
    let pairs: Vec<(f64, f64)> = a
        .f0
        .iter()
        .zip(&b.f0)
        .zip(a.voiced.iter().zip(&b.voiced))
        .filter(|(_, (va, vb))| **va && **vb)
        .map(|((x, y), _)| (*x, *y))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Metrics(format!(
            "only {} jointly voiced frames; need at least 2",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metrics("constant F0 track has no correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// K-means bin model over frame-level log-mel vectors, fitted on the real
/// set with a fixed seed.
pub struct BinModel {
    pub centroids: Vec<Vec<f64>>,
    pub real_proportions: Vec<f64>,
}

const Z_CRITICAL_005: f64 = 1.959_963_985;

/// Fit bins on the real frames, assign both sets, and compare occupancies:
/// NDB counts bins where a two-proportion z-test rejects equality at `alpha`
/// (0.05 uses the usual 1.96 critical value); JSD is the base-2
/// Jensen-Shannon divergence between the two histograms.
pub fn ndb_jsd_frames(
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<(usize, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Metrics("empty frame set".into()));
    }
    if k < 2 || k > real.len() {
        return Err(Error::Metrics(format!(
            "k = {k} must be in [2, {}]",
            real.len()
        )));
    }
    let z_crit = if (alpha - 0.05).abs() < 1e-12 {
        Z_CRITICAL_005
    } else {
        // Coarse inverse normal for other alphas.
        inverse_normal_two_sided(alpha)
    };
    let centroids = kmeans(real, k, 50, seed);
    let assign = |frames: &[Vec<f64>]| {
        let mut counts = vec![0usize; k];
        for f in frames {
            let mut best = 0usize;
            let mut best_d = f64::MAX;
            for (ci, c) in centroids.iter().enumerate() {
                let d: f64 = f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            counts[best] += 1;
        }
        counts
    };
    let c1 = assign(real);
    let c2 = assign(fake);
    Ok(occupancy_divergence(
        &c1,
        real.len(),
        &c2,
        fake.len(),
        z_crit,
    ))
}

/// Compare two bin-occupancy count vectors: the number of bins whose
/// two-proportion z statistic exceeds `z_crit`, and the base-2
/// Jensen-Shannon divergence of the smoothed histograms.
pub fn occupancy_divergence(
    counts_a: &[usize],
    n_a: usize,
    counts_b: &[usize],
    n_b: usize,
    z_crit: f64,
) -> (usize, f64) {
    debug_assert_eq!(counts_a.len(), counts_b.len());
    let k = counts_a.len();
    let n1 = n_a as f64;
    let n2 = n_b as f64;
    let mut ndb = 0usize;
    for bin in 0..k {
        let p1 = counts_a[bin] as f64 / n1;
        let p2 = counts_b[bin] as f64 / n2;
        let pooled = (counts_a[bin] + counts_b[bin]) as f64 / (n1 + n2);
        let se = (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2)).sqrt();
        let z = if se == 0.0 { 0.0 } else { (p1 - p2) / se };
        if z.abs() > z_crit {
            ndb += 1;
        }
    }
    // Smoothed, renormalized occupancy histograms.
    let hist = |counts: &[usize], n: f64| -> Vec<f64> {
        let total: f64 = counts.iter().map(|&c| c as f64 / n + 1e-12).sum();
        counts
            .iter()
            .map(|&c| (c as f64 / n + 1e-12) / total)
            .collect()
    };
    let p = hist(counts_a, n1);
    let q = hist(counts_b, n2);
    let mut jsd = 0.0f64;
    for bin in 0..k {
        let m = 0.5 * (p[bin] + q[bin]);
        jsd += 0.5 * p[bin] * (p[bin] / m).log2() + 0.5 * q[bin] * (q[bin] / m).log2();
    }
    (ndb, jsd.max(0.0))
}

/// Mel-condition wrapper over [`ndb_jsd_frames`].
pub fn ndb_jsd(
    real: &[MelCondition],
    fake: &[MelCondition],
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<(usize, f64)> {
    let flatten = |mels: &[MelCondition]| -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for m in mels {
            for f in 0..m.num_frames() {
                out.push(m.frame(f).iter().map(|&v| v as f64).collect());
            }
        }
        out
    };
    ndb_jsd_frames(&flatten(real), &flatten(fake), k, alpha, seed)
}

/// Seeded k-means++ initialization followed by Lloyd iterations. Empty
/// clusters keep their previous centroid. Fully deterministic per seed.
fn kmeans(frames: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::substream(seed, "metrics/kmeans");
    let dim = frames[0].len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(frames[rng.below(frames.len() as u64) as usize].clone());
    let mut d2 = vec![f64::MAX; frames.len()];
    while centroids.len() < k {
        let last = centroids.last().unwrap();
        let mut total = 0.0f64;
        for (i, f) in frames.iter().enumerate() {
            let d: f64 = f.iter().zip(last).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < d2[i] {
                d2[i] = d;
            }
            total += d2[i];
        }
        let pick = if total <= 0.0 {
            rng.below(frames.len() as u64) as usize
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = frames.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(frames[pick].clone());
    }
    let mut assignment = vec![0usize; frames.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, f) in frames.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::MAX;
            for (ci, c) in centroids.iter().enumerate() {
                let d: f64 = f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in frames.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &x) in sums[assignment[i]].iter_mut().zip(f) {
                *s += x;
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                for (c, s) in centroids[ci].iter_mut().zip(&sums[ci]) {
                    *c = s / counts[ci] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

fn inverse_normal_two_sided(alpha: f64) -> f64 {
    // Bisection on the complementary error function; adequate for test
    // thresholds.
    let target = 1.0 - alpha / 2.0;
    let phi = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let (mut lo, mut hi) = (0.0f64, 10.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn erf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26.
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// One timing measurement: median wall-clock synthesis time over `runs`
/// divided by the audio duration, after one untimed warm-up pass.
#[derive(Debug, Clone)]
pub struct RtfReport {
    pub rtf: f64,
    pub synth_seconds: f64,
    pub audio_seconds: f64,
    pub run_seconds: Vec<f64>,
}

pub fn rtf<S: Scalar>(
    predictor: &dyn Predictor<S>,
    cond: &MelCondition,
    n_steps: usize,
    seed: u64,
) -> Result<RtfReport> {
    let audio_seconds =
        (cond.num_frames() * HOP) as f64 / cond.sample_rate() as f64;
    sample(predictor, cond, n_steps, seed)?; // warm-up
    let mut runs = Vec::with_capacity(5);
    for i in 0..5 {
        let t0 = Instant::now();
        sample(predictor, cond, n_steps, seed + i)?;
        runs.push(t0.elapsed().as_secs_f64());
    }
    let mut sorted = runs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    Ok(RtfReport {
        rtf: median / audio_seconds,
        synth_seconds: median,
        audio_seconds,
        run_seconds: runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::TrainSchedule;
    use crate::dsp::SAMPLE_RATE;
    use crate::grad::Tensor;

    fn sine(freq: f64, len: usize, amp: f32) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| {
                    amp * (std::f64::consts::TAU * freq * i as f64 / SAMPLE_RATE as f64).sin()
                        as f32
                })
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn pure_tone_pitch_is_recovered() {
        // 220.5 Hz has a period of exactly 100 samples at 22050 Hz.
        let w = sine(220.5, 4096, 0.7);
        let track = extract_f0(&w).unwrap();
        assert!(track.voiced.iter().all(|&v| v));
        for &hz in &track.f0 {
            assert!((hz - 220.5).abs() <= 1.0, "got {hz}");
        }
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let mut rng = Rng::seed_from(404);
        let w = Waveform::new(
            (0..8192).map(|_| rng.uniform(-0.8, 0.8) as f32).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let track = extract_f0(&w).unwrap();
        let unvoiced = track.voiced.iter().filter(|v| !**v).count();
        assert!(
            unvoiced as f64 / track.num_frames() as f64 >= 0.9,
            "{unvoiced}/{} unvoiced",
            track.num_frames()
        );
    }

    #[test]
    fn silence_is_unvoiced_with_zero_f0() {
        let w = Waveform::new(vec![0.0; 4096], SAMPLE_RATE).unwrap();
        let track = extract_f0(&w).unwrap();
        assert!(track.voiced.iter().all(|&v| !v));
        assert!(track.f0.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn too_short_input_is_rejected() {
        let w = Waveform::new(vec![0.1; 512], SAMPLE_RATE).unwrap();
        assert!(extract_f0(&w).is_err());
    }

    #[test]
    fn mcd_of_identical_waveforms_is_zero() {
        let w = sine(180.0, 2560, 0.5);
        assert_eq!(mcd(&w, &w).unwrap(), 0.0);
    }

    #[test]
    fn mcd_single_coefficient_offset_matches_closed_form() {
        let mut rng = Rng::seed_from(12);
        let frames = 20usize;
        let a: Vec<[f64; MCD_COEFFS]> = (0..frames)
            .map(|_| {
                let mut c = [0.0; MCD_COEFFS];
                for slot in &mut c {
                    *slot = rng.uniform(-3.0, 3.0);
                }
                c
            })
            .collect();
        let mut b = a.clone();
        for c in &mut b {
            c[4] += 1.0;
        }
        let got = mcd_from_cepstra(&a, &b).unwrap();
        let want = 10.0 / std::f64::consts::LN_10 * 2.0f64.sqrt();
        assert!((got - want).abs() < 1e-3, "got {got}, want {want}");
        assert!((want - 6.1419).abs() < 1e-3);
    }

    #[test]
    fn mcd_is_symmetric() {
        let a = sine(140.0, 2560, 0.5);
        let b = sine(150.0, 2560, 0.4);
        assert_eq!(mcd(&a, &b).unwrap(), mcd(&b, &a).unwrap());
    }

    #[test]
    fn mcd_rejects_length_mismatch() {
        let a = sine(140.0, 2560, 0.5);
        let b = sine(140.0, 2816, 0.5);
        assert!(mcd(&a, &b).is_err());
    }

    #[test]
    fn vuv_examples() {
        let t = |flags: &[bool]| F0Track {
            f0: flags.iter().map(|&v| if v { 100.0 } else { 0.0 }).collect(),
            voiced: flags.to_vec(),
        };
        let a = t(&[true, true, false, false]);
        let b = t(&[true, false, false, false]);
        assert_eq!(vuv_error(&a, &b).unwrap(), 0.25);
        assert_eq!(vuv_error(&a, &a).unwrap(), 0.0);
        let c = t(&[false, false, true, true]);
        assert_eq!(vuv_error(&a, &c).unwrap(), 1.0);
    }

    #[test]
    fn f0_correlation_examples() {
        let mk = |vals: &[f64]| F0Track {
            f0: vals.to_vec(),
            voiced: vals.iter().map(|&v| v > 0.0).collect(),
        };
        let a = mk(&[100.0, 120.0, 140.0, 160.0]);
        assert!((f0_corr(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let doubled = mk(&[200.0, 240.0, 280.0, 320.0]);
        assert!((f0_corr(&a, &doubled).unwrap() - 1.0).abs() < 1e-12);
        let reversed = mk(&[160.0, 140.0, 120.0, 100.0]);
        assert!((f0_corr(&a, &reversed).unwrap() + 1.0).abs() < 1e-12);

        let short = mk(&[100.0, 0.0, 0.0, 0.0]);
        assert!(f0_corr(&a, &short).is_err());
    }

    #[test]
    fn ndb_jsd_self_comparison_is_null() {
        let mut rng = Rng::seed_from(9);
        let frames: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let (ndb, jsd) = ndb_jsd_frames(&frames, &frames, 10, 0.05, 1).unwrap();
        assert_eq!(ndb, 0);
        assert_eq!(jsd, 0.0);
    }

    #[test]
    fn disjoint_occupancy_reaches_one_bit() {
        // All mass of one set in bin A, all of the other in bin B: maximal
        // base-2 divergence, and both bins flagged as different.
        let (ndb, jsd) = occupancy_divergence(&[100, 0], 100, &[0, 100], 100, 1.96);
        assert!((jsd - 1.0).abs() < 1e-6, "jsd {jsd}");
        assert_eq!(ndb, 2);
    }

    #[test]
    fn separated_clusters_are_flagged_by_the_z_test() {
        // Real mass split over two far clusters; fake concentrated in one.
        let mut rng = Rng::seed_from(15);
        let mut cluster = |center: f64, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..4).map(|_| center + rng.gaussian() * 0.1).collect())
                .collect()
        };
        let mut real = cluster(0.0, 100);
        real.extend(cluster(10.0, 100));
        let fake = cluster(10.0, 200);
        let (ndb, jsd) = ndb_jsd_frames(&real, &fake, 2, 0.05, 3).unwrap();
        assert_eq!(ndb, 2, "both bins should differ");
        assert!(jsd > 0.2, "jsd {jsd}");
    }

    #[test]
    fn matched_distributions_stay_under_the_calibration_bound() {
        // Two equal-size draws from one synthetic mixture: NDB should stay
        // within ceil(alpha * k) + 2 at alpha = 0.05, k = 50.
        let mut rng = Rng::seed_from(777);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let mode = rng.below(3) as usize as f64;
                    (0..8)
                        .map(|d| mode * 2.0 + (d as f64 * 0.1) + rng.gaussian() * 0.5)
                        .collect()
                })
                .collect()
        };
        let real = draw(2500);
        let fake = draw(2500);
        let (ndb, jsd) = ndb_jsd_frames(&real, &fake, 50, 0.05, 42).unwrap();
        assert!(ndb <= 5, "NDB {ndb} above calibration bound");
        assert!(jsd < 0.05, "JSD {jsd} unexpectedly large");
    }

    #[test]
    fn k_larger_than_real_set_is_rejected() {
        let frames: Vec<Vec<f64>> = (0..10).map(|_| vec![0.0; 4]).collect();
        assert!(ndb_jsd_frames(&frames, &frames, 20, 0.05, 1).is_err());
    }

    #[test]
    fn rtf_reports_positive_ratio() {
        struct Echo;
        impl Predictor<f64> for Echo {
            fn predict(
                &self,
                x: &Tensor<f64>,
                _c: &MelCondition,
                _t: usize,
            ) -> crate::Result<Tensor<f64>> {
                Ok(x.clone())
            }
            fn schedule(&self) -> TrainSchedule {
                TrainSchedule::default()
            }
        }
        let mel = MelCondition::from_rows(vec![0.0; 4 * 80], 4, SAMPLE_RATE).unwrap();
        let report = rtf(&Echo, &mel, 3, 5).unwrap();
        assert!(report.rtf > 0.0);
        assert!((report.audio_seconds - 4.0 * 256.0 / 22050.0).abs() < 1e-9);
        assert_eq!(report.run_seconds.len(), 5);
    }
}
