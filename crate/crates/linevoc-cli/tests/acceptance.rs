//! Acceptance suite: every release-gating property, one test per criterion,
//! each printing a single PASS line with its measured numbers (visible with
//! `--nocapture`).
//!
//! The heavyweight overfit experiment is shared between the criteria that
//! need a trained model.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use linevoc::critic::CriticConfig;
use linevoc::denoiser::{Denoiser, DenoiserConfig};
use linevoc::diffusion::{sample, Predictor, TrainSchedule};
use linevoc::dsp::{mel_condition, MelCondition, Waveform, HOP, SAMPLE_RATE};
use linevoc::grad::{Graph, Tensor};
use linevoc::loss::{stft_loss_with, StftBank};
use linevoc::metrics;
use linevoc::rng::Rng;
use linevoc::train::{synth_dataset, Dataset, SynthDatasetSpec, TrainConfig, Trainer};
use linevoc::verify;

// ---------------------------------------------------------------------------
// Criterion 1: sampler exactness
// ---------------------------------------------------------------------------

struct OraclePredictor {
    answer: Tensor<f64>,
}

impl Predictor<f64> for OraclePredictor {
    fn predict(
        &self,
        _x: &Tensor<f64>,
        _c: &MelCondition,
        _t: usize,
    ) -> linevoc::Result<Tensor<f64>> {
        Ok(self.answer.clone())
    }
    fn schedule(&self) -> TrainSchedule {
        TrainSchedule::default()
    }
}

#[test]
fn criterion_1_sampler_exactness() {
    let started = Instant::now();
    let frames = 4usize;
    let mel = MelCondition::from_rows(vec![0.0; frames * 80], frames, SAMPLE_RATE).unwrap();
    let mut rng = Rng::seed_from(0xacce01);
    let x_data = Tensor::<f64>::from_fn(&[frames * HOP], |_| rng.uniform(-0.9, 0.9));
    let oracle = OraclePredictor {
        answer: x_data.clone(),
    };
    let max_abs = x_data.max_abs();
    let mut worst = 0.0f64;
    for n in [1usize, 3, 100] {
        let out = sample(&oracle, &mel, n, 12345).unwrap();
        let rel = out
            .samples()
            .iter()
            .zip(x_data.data())
            .map(|(&o, &d)| (o as f64 - d).abs())
            .fold(0.0f64, f64::max)
            / max_abs;
        assert!(rel < 1e-6, "N={n}: max relative error {rel}");
        worst = worst.max(rel);
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 1.0, "took {secs:.3}s, budget 1s");
    println!(
        "criterion 1 (sampler exactness): PASS - worst rel err {worst:.2e} over N in {{1,3,100}}, {secs:.3}s"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient integrity
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_integrity() {
    let started = Instant::now();
    let checks = verify::full_suite(8).unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for c in &checks {
        assert!(
            c.passed(),
            "{} failed: rel err {} at {}",
            c.name,
            c.max_rel_err,
            c.worst_param
        );
        if c.max_rel_err > worst {
            worst = c.max_rel_err;
            worst_name = c.name.clone();
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "took {secs:.1}s, budget 5 min");
    println!(
        "criterion 2 (gradient integrity): PASS - {} checks, worst {:.2e} ({worst_name}), {secs:.1}s",
        checks.len(),
        worst
    );
}

// ---------------------------------------------------------------------------
// Criteria 3 and 4 share one trained model.
// ---------------------------------------------------------------------------

struct OverfitFixture {
    model: Denoiser<f32>,
    dataset: Dataset,
    steps_run: usize,
    best_trailing_l_diff: f64,
    train_secs: f64,
    mcd_per_clip: Vec<f64>,
    total_secs: f64,
}

static OVERFIT: OnceLock<OverfitFixture> = OnceLock::new();

fn overfit_spec() -> SynthDatasetSpec {
    SynthDatasetSpec {
        n_clips: 4,
        clip_samples: 22_016, // 86 frames, within 93 us of 1.0 s at 22050 Hz
        f0_min: 80.0,
        f0_max: 400.0,
        max_harmonics: 8,
        noise_burst_prob: 0.0,
        sample_rate: SAMPLE_RATE,
        seed: 2301,
    }
}

fn overfit() -> &'static OverfitFixture {
    OVERFIT.get_or_init(|| {
        let started = Instant::now();
        let dcfg = DenoiserConfig {
            patch_size: 64,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            step_pe_dim: 128,
            postconv_channels: 32,
            lvc_kernel: 3,
            lvc_layers: 2,
            max_tokens: 3600,
            t_train_max: 1000,
        };
        let tcfg = TrainConfig {
            stage1_end: 3000,
            stage2_end: 3000,
            total_steps: 3000,
            batch_size: 4,
            clip_samples_short: 22_016,
            clip_samples_long: 22_016,
            lr: 1e-3,
            checkpoint_interval: 0,
            seed: 2301,
            ..Default::default()
        };
        let dataset = synth_dataset(&overfit_spec()).unwrap();
        let mut trainer = Trainer::new(dcfg, CriticConfig::default(), tcfg).unwrap();

        // Train until the trailing training loss clears the bar (with some
        // margin) or the step budget runs out.
        let window = 25usize;
        let mut recent: Vec<f64> = Vec::new();
        let mut best_trailing = f64::MAX;
        let mut steps_run = 0usize;
        for step in 1..=3000usize {
            let report = trainer.train_step(&dataset).unwrap();
            steps_run = step;
            recent.push(report.l_diff);
            if recent.len() > window {
                recent.remove(0);
            }
            if recent.len() == window {
                let mean = recent.iter().sum::<f64>() / window as f64;
                best_trailing = best_trailing.min(mean);
                if mean < 0.0095 {
                    break;
                }
            }
            if step % 200 == 0 {
                eprintln!(
                    "overfit step {step}: l_diff {:.5} (trailing {:.5})",
                    report.l_diff,
                    recent.iter().sum::<f64>() / recent.len() as f64
                );
            }
        }
        assert_eq!(trainer.critic_eval_count, 0, "stage 1 must never score critics");
        let train_secs = started.elapsed().as_secs_f64();

        // 100-step samples against ground truth.
        let model = trainer.denoiser.clone();
        let mut mcds = Vec::new();
        for (clip, mel) in dataset.clips.iter().zip(&dataset.mels) {
            let out = sample(&model, mel, 100, 77).unwrap();
            mcds.push(metrics::mcd(&out, clip).unwrap());
        }
        OverfitFixture {
            model,
            dataset,
            steps_run,
            best_trailing_l_diff: best_trailing,
            train_secs,
            mcd_per_clip: mcds,
            total_secs: started.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_3_desk_scale_overfit() {
    let fx = overfit();
    assert!(
        fx.best_trailing_l_diff < 0.01,
        "l_diff reached {:.5} after {} steps, needs < 0.01 within 3000",
        fx.best_trailing_l_diff,
        fx.steps_run
    );
    let mean_mcd = fx.mcd_per_clip.iter().sum::<f64>() / fx.mcd_per_clip.len() as f64;
    assert!(
        mean_mcd < 3.0,
        "mean 100-step MCD {mean_mcd:.3} dB, needs < 3.0 (per clip: {:?})",
        fx.mcd_per_clip
    );
    assert!(
        fx.total_secs < 1800.0,
        "overfit run took {:.0}s, budget 30 min",
        fx.total_secs
    );
    println!(
        "criterion 3 (desk-scale overfit): PASS - l_diff {:.4} in {} steps, mean MCD {:.3} dB, {:.0}s",
        fx.best_trailing_l_diff, fx.steps_run, mean_mcd, fx.total_secs
    );
}

/// Mean magnitude-spectrogram MSE over all four analysis configurations.
fn multi_config_stft_loss(a: &Waveform, b: &Waveform) -> f64 {
    let bank = StftBank::<f32>::default_bank().unwrap();
    let g = Graph::<f32>::new();
    let an = g.constant(Tensor::new(&[a.len()], a.samples().to_vec()));
    let bn = g.constant(Tensor::new(&[b.len()], b.samples().to_vec()));
    let mut acc = 0.0f64;
    for idx in 0..4 {
        acc += stft_loss_with(&g, &an, &bn, &bank, idx)
            .unwrap()
            .item() as f64;
    }
    acc / 4.0
}

#[test]
fn criterion_4_step_count_trend() {
    let fx = overfit();
    // Held conditions: clips from the same family the model never saw.
    let held_spec = SynthDatasetSpec {
        n_clips: 8,
        seed: 9999,
        ..overfit_spec()
    };
    let held = synth_dataset(&held_spec).unwrap();
    let mut means = [0.0f64; 3];
    let step_counts = [1usize, 3, 100];
    for (clip, mel) in held.clips.iter().zip(&held.mels) {
        for (i, &n) in step_counts.iter().enumerate() {
            let out = sample(&fx.model, mel, n, 4242).unwrap();
            means[i] += multi_config_stft_loss(&out, clip) / held.clips.len() as f64;
        }
    }
    assert!(
        means[2] <= means[0],
        "100-step loss {:.4} should not exceed 1-step loss {:.4}",
        means[2],
        means[0]
    );
    println!(
        "criterion 4 (step-count trend): PASS - held STFT loss 1-step {:.4}, 3-step {:.4}, 100-step {:.4}",
        means[0], means[1], means[2]
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: adversarial stability and critic cadence
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_adversarial_stability() {
    let started = Instant::now();
    let dcfg = DenoiserConfig {
        patch_size: 64,
        hidden_dim: 32,
        n_layers: 1,
        n_heads: 2,
        step_pe_dim: 128,
        postconv_channels: 8,
        lvc_kernel: 3,
        lvc_layers: 1,
        max_tokens: 256,
        t_train_max: 1000,
    };
    let tcfg = TrainConfig {
        stage1_end: 0,
        stage2_end: 500,
        total_steps: 1000,
        batch_size: 2,
        clip_samples_short: 4096,
        clip_samples_long: 4096,
        lr: 2e-4,
        seed: 505,
        ..Default::default()
    };
    let spec = SynthDatasetSpec {
        n_clips: 6,
        clip_samples: 4096,
        seed: 505,
        ..Default::default()
    };
    let dataset = synth_dataset(&spec).unwrap();
    let mut trainer = Trainer::new(dcfg, CriticConfig::default(), tcfg).unwrap();
    for step in 1..=1000usize {
        let report = trainer.train_step(&dataset).unwrap();
        assert!(
            report.all_finite(),
            "non-finite loss at step {step}: {report:?}"
        );
    }
    assert_eq!(
        trainer.d_update_count_stage3, 100,
        "stage-3 critic updates: {} (want exactly 100)",
        trainer.d_update_count_stage3
    );
    assert_eq!(trainer.skipped_updates, 0, "updates were skipped");
    println!(
        "criterion 5 (adversarial stability): PASS - 1000 steps finite, {} stage-3 critic updates, {:.0}s",
        trainer.d_update_count_stage3,
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: metric oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_metric_oracles() {
    // MCD of identical audio is exactly zero.
    let tone = Waveform::new(
        (0..4096)
            .map(|i| {
                0.6 * (std::f64::consts::TAU * 180.0 * i as f64 / SAMPLE_RATE as f64).sin() as f32
            })
            .collect(),
        SAMPLE_RATE,
    )
    .unwrap();
    assert_eq!(metrics::mcd(&tone, &tone).unwrap(), 0.0);

    // Unit offset in one cepstral coefficient per frame.
    let mut rng = Rng::seed_from(66);
    let a: Vec<[f64; 13]> = (0..32)
        .map(|_| {
            let mut c = [0.0; 13];
            for slot in &mut c {
                *slot = rng.uniform(-2.0, 2.0);
            }
            c
        })
        .collect();
    let mut b = a.clone();
    for c in &mut b {
        c[7] += 1.0;
    }
    let got = metrics::mcd_from_cepstra(&a, &b).unwrap();
    assert!((got - 6.1419).abs() < 1e-3, "offset construction gave {got}");

    // Voicing error and F0 correlation on the hand-written examples.
    let t = |flags: &[bool]| metrics::F0Track {
        f0: flags
            .iter()
            .enumerate()
            .map(|(i, &v)| if v { 100.0 + i as f64 } else { 0.0 })
            .collect(),
        voiced: flags.to_vec(),
    };
    let ta = t(&[true, true, false, false]);
    let tb = t(&[true, false, false, false]);
    assert_eq!(metrics::vuv_error(&ta, &tb).unwrap(), 0.25);
    let va = metrics::F0Track {
        f0: vec![100.0, 120.0, 140.0],
        voiced: vec![true, true, true],
    };
    let vb = metrics::F0Track {
        f0: vec![200.0, 240.0, 280.0],
        voiced: vec![true, true, true],
    };
    assert!((metrics::f0_corr(&va, &vb).unwrap() - 1.0).abs() < 1e-12);
    let vc = metrics::F0Track {
        f0: vec![140.0, 120.0, 100.0],
        voiced: vec![true, true, true],
    };
    assert!((metrics::f0_corr(&va, &vc).unwrap() + 1.0).abs() < 1e-12);

    // Self-comparison diversity is exactly null.
    let mels: Vec<MelCondition> = (0..4)
        .map(|i| {
            let w = Waveform::new(
                (0..2560)
                    .map(|j| {
                        0.5 * (std::f64::consts::TAU * (150.0 + 30.0 * i as f64) * j as f64
                            / SAMPLE_RATE as f64)
                            .sin() as f32
                    })
                    .collect(),
                SAMPLE_RATE,
            )
            .unwrap();
            mel_condition(&w).unwrap()
        })
        .collect();
    let (ndb, jsd) = metrics::ndb_jsd(&mels, &mels, 10, 0.05, 3).unwrap();
    assert_eq!((ndb, jsd), (0, 0.0));

    // Pure tone with an exact 100-sample period.
    let sine = Waveform::new(
        (0..8192)
            .map(|i| {
                0.7 * (std::f64::consts::TAU * 220.5 * i as f64 / SAMPLE_RATE as f64).sin() as f32
            })
            .collect(),
        SAMPLE_RATE,
    )
    .unwrap();
    let track = metrics::extract_f0(&sine).unwrap();
    assert!(track.voiced.iter().all(|&v| v));
    for &hz in &track.f0 {
        assert!((hz - 220.5).abs() <= 1.0, "tracked {hz} Hz");
    }
    println!("criterion 6 (metric oracles): PASS - mcd/vuv/f0corr/ndb/f0 all exact");
}

// ---------------------------------------------------------------------------
// Criterion 7: end-to-end determinism through the CLI
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str], cwd: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_linevoc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn linevoc");
    assert!(
        out.status.success(),
        "linevoc {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_7_pipeline_determinism() {
    let started = Instant::now();
    let base = std::env::temp_dir().join(format!("accept7_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();
    let cfg = r#"
denoiser.hidden_dim = 16
denoiser.n_layers = 1
denoiser.n_heads = 2
denoiser.postconv_channels = 4
denoiser.lvc_layers = 1
denoiser.t_train_max = 100
critic.spectral_n_fft = 128
critic.spectral_win = 128
critic.spectral_hop = 32
critic.spectral_widths = 4,8
critic.msd_widths = 4,8
critic.mpd_widths = 4,8
train.stage1_end = 120
train.stage2_end = 160
train.total_steps = 200
train.batch_size = 2
train.clip_samples_short = 2560
train.clip_samples_long = 4096
train.lr = 5e-4
train.seed = 77
data.n_clips = 3
data.clip_samples = 4096
data.seed = 77
"#;
    std::fs::write(base.join("cfg.txt"), cfg).unwrap();
    for run in ["a", "b"] {
        let dir = base.join(run);
        std::fs::create_dir_all(&dir).unwrap();
        run_cli(
            &["synth-data", "--out", "data", "--config", "../cfg.txt"],
            &dir,
        );
        run_cli(
            &[
                "train",
                "--config",
                "../cfg.txt",
                "--data",
                "data",
                "--out",
                "run",
            ],
            &dir,
        );
        run_cli(
            &[
                "sample",
                "--checkpoint",
                "run/ckpt/final",
                "--mel",
                "data/clip_0000.mel",
                "--steps",
                "3",
                "--seed",
                "9",
                "--out",
                "out.wav",
            ],
            &dir,
        );
    }
    let file = |r: &str, p: &str| std::fs::read(base.join(r).join(p)).unwrap();
    assert_eq!(
        file("a", "data/clip_0000.wav"),
        file("b", "data/clip_0000.wav"),
        "dataset bytes differ"
    );
    assert_eq!(
        file("a", "run/loss.csv"),
        file("b", "run/loss.csv"),
        "loss logs differ"
    );
    assert_eq!(file("a", "out.wav"), file("b", "out.wav"), "samples differ");
    std::fs::remove_dir_all(&base).ok();
    println!(
        "criterion 7 (pipeline determinism): PASS - identical dataset, 200-step loss log, and sample bytes, {:.0}s",
        started.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: RTF scaling
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_rtf_scaling() {
    let dcfg = DenoiserConfig {
        hidden_dim: 64,
        n_layers: 2,
        ..Default::default()
    };
    let mut rng = Rng::seed_from(8);
    let model = Denoiser::<f32>::new(dcfg, &mut rng).unwrap();
    let spec = SynthDatasetSpec {
        n_clips: 1,
        clip_samples: 22_016,
        noise_burst_prob: 0.0,
        seed: 8,
        ..Default::default()
    };
    let dataset = synth_dataset(&spec).unwrap();
    let r3 = metrics::rtf(&model, &dataset.mels[0], 3, 1).unwrap();
    let r100 = metrics::rtf(&model, &dataset.mels[0], 100, 1).unwrap();
    let ratio = r100.rtf / r3.rtf;
    assert!(
        (10.0..=60.0).contains(&ratio),
        "RTF(100)/RTF(3) = {ratio:.1}, expected within [10, 60]"
    );
    println!(
        "criterion 8 (RTF scaling): PASS - RTF 3-step {:.4}, 100-step {:.4}, ratio {:.1}x (absolute values reported, not asserted)",
        r3.rtf, r100.rtf, ratio
    );
}
