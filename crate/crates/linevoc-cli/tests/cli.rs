//! Integration tests for the command-line surface.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_linevoc")
}

fn run_ok(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(bin())
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
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_fail(args: &[&str], cwd: &Path) -> String {
    let out = Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn linevoc");
    assert!(!out.status.success(), "linevoc {args:?} unexpectedly passed");
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("linevoc_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CFG: &str = r#"
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
train.stage1_end = 6
train.stage2_end = 8
train.total_steps = 10
train.batch_size = 2
train.clip_samples_short = 2560
train.clip_samples_long = 4096
train.lr = 5e-4
train.checkpoint_interval = 0
train.seed = 42
data.n_clips = 3
data.clip_samples = 4096
data.seed = 42
"#;

#[test]
fn synth_data_is_reproducible_and_complete() {
    let dir = scratch("synth");
    std::fs::write(dir.join("cfg.txt"), TINY_CFG).unwrap();
    run_ok(
        &["synth-data", "--out", "d1", "--config", "cfg.txt"],
        &dir,
    );
    run_ok(
        &["synth-data", "--out", "d2", "--config", "cfg.txt"],
        &dir,
    );
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("d1/manifest.json")).unwrap())
            .unwrap();
    let clips = manifest["clips"].as_array().unwrap();
    assert_eq!(clips.len(), 3);
    for entry in clips {
        let wav = entry["wav"].as_str().unwrap();
        let mel = entry["mel"].as_str().unwrap();
        // Byte-identical across runs.
        assert_eq!(
            std::fs::read(dir.join("d1").join(wav)).unwrap(),
            std::fs::read(dir.join("d2").join(wav)).unwrap()
        );
        assert_eq!(
            std::fs::read(dir.join("d1").join(mel)).unwrap(),
            std::fs::read(dir.join("d2").join(mel)).unwrap()
        );
        // Emitted WAVs read back cleanly.
        let w = linevoc::dsp::wav::wav_read(&dir.join("d1").join(wav)).unwrap();
        assert_eq!(w.len(), 4096);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_sample_eval_roundtrip_and_step_counts() {
    let dir = scratch("pipeline");
    std::fs::write(dir.join("cfg.txt"), TINY_CFG).unwrap();
    run_ok(&["synth-data", "--out", "data", "--config", "cfg.txt"], &dir);
    run_ok(
        &[
            "train", "--config", "cfg.txt", "--data", "data", "--out", "run",
        ],
        &dir,
    );
    // The loss log covers every step with the expected header.
    let log = std::fs::read_to_string(dir.join("run/loss.csv")).unwrap();
    let lines: Vec<&str> = log.trim().lines().collect();
    assert_eq!(lines[0], "step,stage,l_diff,l_s,l_adv_g,l_adv_d,l_gen,stft_cfg_index");
    assert_eq!(lines.len(), 11, "10 steps plus header");

    // Sampling works for 1, 3, and 100 steps and the duration matches the
    // conditioning length.
    for steps in ["1", "3", "100"] {
        let out_name = format!("out{steps}.wav");
        run_ok(
            &[
                "sample",
                "--checkpoint",
                "run/ckpt/final",
                "--mel",
                "data/clip_0000.mel",
                "--steps",
                steps,
                "--seed",
                "5",
                "--out",
                &out_name,
            ],
            &dir,
        );
        let w = linevoc::dsp::wav::wav_read(&dir.join(&out_name)).unwrap();
        assert_eq!(w.len(), 4096);
    }
    // Same sampling request twice: byte-identical output.
    run_ok(
        &[
            "sample",
            "--checkpoint",
            "run/ckpt/final",
            "--mel",
            "data/clip_0000.mel",
            "--steps",
            "3",
            "--seed",
            "5",
            "--out",
            "again.wav",
        ],
        &dir,
    );
    assert_eq!(
        std::fs::read(dir.join("out3.wav")).unwrap(),
        std::fs::read(dir.join("again.wav")).unwrap()
    );

    // Evaluating a directory against itself is exactly null.
    let report = dir.join("self.csv");
    run_ok(
        &[
            "eval",
            "--real",
            "data",
            "--fake",
            "data",
            "--report",
            report.to_str().unwrap(),
            "--set",
            "eval.k=8",
        ],
        &dir,
    );
    let text = std::fs::read_to_string(&report).unwrap();
    let summary = text
        .trim()
        .lines()
        .last()
        .expect("summary row");
    let fields: Vec<&str> = summary.split(',').collect();
    assert_eq!(fields[0], "summary");
    assert_eq!(fields[1].parse::<f64>().unwrap(), 0.0, "mcd");
    assert_eq!(fields[2].parse::<f64>().unwrap(), 0.0, "vuv");
    assert_eq!(fields[3].parse::<f64>().unwrap(), 1.0, "f0corr");
    assert_eq!(fields[4].parse::<usize>().unwrap(), 0, "ndb");
    assert!(fields[5].parse::<f64>().unwrap().abs() < 1e-12, "jsd");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn resume_continues_identically() {
    let dir = scratch("resume");
    let cfg = TINY_CFG.replace("train.checkpoint_interval = 0", "train.checkpoint_interval = 6");
    std::fs::write(dir.join("cfg.txt"), &cfg).unwrap();
    run_ok(&["synth-data", "--out", "data", "--config", "cfg.txt"], &dir);
    run_ok(
        &["train", "--config", "cfg.txt", "--data", "data", "--out", "full"],
        &dir,
    );
    // Resume from the step-6 checkpoint into a fresh run directory.
    run_ok(
        &[
            "train",
            "--config",
            "cfg.txt",
            "--data",
            "data",
            "--out",
            "resumed",
            "--resume",
            "full/ckpt/step_000006",
        ],
        &dir,
    );
    let full_log = std::fs::read_to_string(dir.join("full/loss.csv")).unwrap();
    let resumed_log = std::fs::read_to_string(dir.join("resumed/loss.csv")).unwrap();
    let tail_full: Vec<&str> = full_log.trim().lines().skip(7).collect(); // steps 7..=10
    let tail_resumed: Vec<&str> = resumed_log.trim().lines().skip(1).collect();
    assert_eq!(tail_full, tail_resumed, "continuation diverged");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_reports_rows_and_fails_on_injected_fault() {
    let dir = scratch("gradcheck");
    let out = run_ok(&["gradcheck", "--hidden", "6"], &dir);
    let rows = out.lines().filter(|l| l.starts_with("pass")).count();
    assert!(rows > 30, "expected one row per op and block, got {rows}");

    let out = run_fail(&["gradcheck", "--hidden", "6", "--inject-fault"], &dir);
    assert!(out.contains("FAIL"), "fault row missing:\n{out}");
    assert!(out.contains("injected_fault"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_inputs_produce_clean_errors() {
    let dir = scratch("errors");
    std::fs::write(dir.join("cfg.txt"), TINY_CFG).unwrap();
    // Missing output dir.
    let msg = run_fail(&["train", "--config", "cfg.txt"], &dir);
    assert!(msg.contains("output directory"), "got: {msg}");
    // Bad config value.
    let msg = run_fail(
        &[
            "synth-data",
            "--out",
            "x",
            "--config",
            "cfg.txt",
            "--set",
            "data.clip_samples=1000",
        ],
        &dir,
    );
    assert!(msg.contains("multiple of"), "got: {msg}");
    std::fs::remove_dir_all(&dir).ok();
}
