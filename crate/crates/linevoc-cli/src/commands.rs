//! Command implementations. Thin orchestration over the library: read and
//! echo configuration, wire files to the typed APIs, report results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use linevoc::config as kvcfg;
use linevoc::config::KvMap;
use linevoc::denoiser::Denoiser;
use linevoc::diffusion::sample as run_sampler;
use linevoc::dsp::{
    mel_condition, read_mel_blob, wav::wav_read, wav::wav_write, write_mel_blob, MelCondition,
    HOP,
};
use linevoc::grad::{checkpoint, Parameterized, Tensor};
use linevoc::loss::LossReport;
use linevoc::metrics;
use linevoc::rng::Rng;
use linevoc::train::{synth_clip, Dataset, SynthDatasetSpec, Trainer};
use linevoc::verify;

fn load_kv(config: Option<&Path>, overrides: &[String]) -> Result<KvMap> {
    let mut kv = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            KvMap::parse(&text)?
        }
        None => KvMap::new(),
    };
    for o in overrides {
        kv.apply_override(o)?;
    }
    Ok(kv)
}

fn print_resolved(title: &str, kv: &KvMap) {
    println!("# resolved configuration ({title})");
    print!("{}", kv.render());
    println!("# ---");
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

pub fn synth_data(out: &Path, config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let kv = load_kv(config, overrides)?;
    let spec = kvcfg::dataset_from_kv(&kv)?;
    let mut resolved = KvMap::new();
    kvcfg::dataset_to_kv(&spec, &mut resolved);
    resolved.set("paths.out_dir", out.display());
    print_resolved("synth-data", &resolved);

    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let clip = synth_clip(&spec, i)?;
        let mel = mel_condition(&clip)?;
        let wav_name = format!("clip_{i:04}.wav");
        let mel_name = format!("clip_{i:04}.mel");
        wav_write(&clip, &out.join(&wav_name))?;
        write_mel_blob(&mel, &out.join(&mel_name))?;
        entries.push(serde_json::json!({
            "wav": wav_name,
            "mel": mel_name,
            "samples": clip.len(),
            "frames": mel.num_frames(),
            "clip_index": i,
        }));
    }
    let manifest = serde_json::json!({
        "spec": {
            "n_clips": spec.n_clips,
            "clip_samples": spec.clip_samples,
            "f0_min": spec.f0_min,
            "f0_max": spec.f0_max,
            "max_harmonics": spec.max_harmonics,
            "noise_burst_prob": spec.noise_burst_prob,
            "sample_rate": spec.sample_rate,
            "seed": spec.seed,
        },
        "clips": entries,
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "wrote {} clips ({} samples each) to {}",
        spec.n_clips,
        spec.clip_samples,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mut wavs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading dataset dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        bail!("no .wav files in {}", dir.display());
    }
    let mut clips = Vec::with_capacity(wavs.len());
    let mut mels = Vec::with_capacity(wavs.len());
    for w in &wavs {
        let clip = wav_read(w)?;
        let mel_path = w.with_extension("mel");
        let mel = if mel_path.exists() {
            read_mel_blob(&mel_path, clip.sample_rate())?
        } else {
            mel_condition(&clip)?
        };
        clips.push(clip);
        mels.push(mel);
    }
    Ok(Dataset { clips, mels })
}

pub fn train(
    config: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    resume: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let kv = load_kv(Some(config), overrides)?;
    let dcfg = kvcfg::denoiser_from_kv(&kv)?;
    let ccfg = kvcfg::critic_from_kv(&kv)?;
    let tcfg = kvcfg::train_from_kv(&kv)?;

    let data_dir: Option<PathBuf> = data
        .map(|p| p.to_path_buf())
        .or_else(|| kv.get("paths.data_dir").map(PathBuf::from));
    let out_dir: PathBuf = out
        .map(|p| p.to_path_buf())
        .or_else(|| kv.get("paths.out_dir").map(PathBuf::from))
        .context("no output directory: pass --out or set paths.out_dir")?;

    let mut resolved = KvMap::new();
    kvcfg::denoiser_to_kv(&dcfg, &mut resolved);
    kvcfg::critic_to_kv(&ccfg, &mut resolved);
    kvcfg::train_to_kv(&tcfg, &mut resolved);
    if let Some(d) = &data_dir {
        resolved.set("paths.data_dir", d.display());
    }
    resolved.set("paths.out_dir", out_dir.display());

    let dataset = match &data_dir {
        Some(dir) => load_dataset_dir(dir)?,
        None => {
            let spec = kvcfg::dataset_from_kv(&kv)?;
            kvcfg::dataset_to_kv(&spec, &mut resolved);
            linevoc::train::synth_dataset(&spec)?
        }
    };
    print_resolved("train", &resolved);

    fs::create_dir_all(&out_dir)?;
    let ckpt_dir = out_dir.join("ckpt");
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(ckpt_dir.join("config.txt"), resolved.render())?;

    let mut trainer = match resume {
        Some(dir) => Trainer::resume(dcfg, ccfg, tcfg, dir)?,
        None => Trainer::new(dcfg, ccfg, tcfg)?,
    };

    let log_path = out_dir.join("loss.csv");
    let fresh_log = !log_path.exists() || resume.is_none();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)?;
    if fresh_log {
        writeln!(log, "{}", LossReport::CSV_HEADER)?;
    }

    let started = Instant::now();
    let total = trainer.config().total_steps;
    println!(
        "training from step {} to {total}...",
        trainer.completed_steps() + 1
    );
    trainer.run(&dataset, Some(&ckpt_dir), &mut |report| {
        writeln!(log, "{}", report.to_csv_row()).map_err(linevoc::Error::Io)?;
        if report.step % 50 == 0 || report.step == total {
            eprintln!(
                "step {}/{total} stage {} l_diff {:.5} l_s {:.4} l_gen {:.4}",
                report.step,
                report.stage.index(),
                report.l_diff,
                report.l_s,
                report.l_gen
            );
        }
        Ok(())
    })?;
    println!(
        "finished {} steps in {:.1}s; final checkpoint at {}",
        total,
        started.elapsed().as_secs_f64(),
        ckpt_dir.join("final").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// Load a denoiser (config + weights) from a checkpoint directory. Looks for
/// config.txt inside the directory, then one level up.
pub(crate) fn load_denoiser(ckpt: &Path) -> Result<(Denoiser<f32>, KvMap)> {
    let cfg_path = [ckpt.join("config.txt")]
        .into_iter()
        .chain(ckpt.parent().map(|p| p.join("config.txt")))
        .find(|p| p.exists())
        .with_context(|| format!("no config.txt in or beside {}", ckpt.display()))?;
    let kv = KvMap::parse(&fs::read_to_string(&cfg_path)?)?;
    let dcfg = kvcfg::denoiser_from_kv(&kv)?;
    let mut rng = Rng::seed_from(0);
    let mut model = Denoiser::<f32>::new(dcfg, &mut rng)?;
    let (entries, _meta) = checkpoint::load(ckpt)?;
    let table: std::collections::BTreeMap<String, Tensor<f32>> = entries.into_iter().collect();
    let loaded = model.load_named(&table)?;
    if loaded == 0 {
        bail!("checkpoint {} holds no denoiser parameters", ckpt.display());
    }
    Ok((model, kv))
}

fn load_condition(path: &Path, sample_rate: u32) -> Result<MelCondition> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("mel") => Ok(read_mel_blob(path, sample_rate)?),
        Some("wav") => {
            let w = wav_read(path)?;
            Ok(mel_condition(&w)?)
        }
        _ => bail!("condition must be a .mel blob or a .wav file"),
    }
}

pub fn sample(checkpoint: &Path, mel: &Path, steps: usize, seed: u64, out: &Path) -> Result<()> {
    if steps == 0 {
        bail!("steps must be >= 1");
    }
    let (model, kv) = load_denoiser(checkpoint)?;
    let sample_rate = kv.get_u64("data.sample_rate", linevoc::dsp::SAMPLE_RATE as u64)? as u32;
    let cond = load_condition(mel, sample_rate)?;

    let mut resolved = KvMap::new();
    kvcfg::denoiser_to_kv(model.config(), &mut resolved);
    resolved.set("sample.steps", steps);
    resolved.set("sample.seed", seed);
    resolved.set("sample.mel", mel.display());
    resolved.set("sample.out", out.display());
    print_resolved("sample", &resolved);

    let t0 = Instant::now();
    let wave = run_sampler(&model, &cond, steps, seed)?;
    let elapsed = t0.elapsed().as_secs_f64();
    wav_write(&wave, out)?;
    let rtf = elapsed / wave.duration_secs();
    println!(
        "wrote {} ({:.3}s audio, {} frames) in {:.3}s; RTF {:.4}",
        out.display(),
        wave.duration_secs(),
        cond.num_frames(),
        elapsed,
        rtf
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval(real: &Path, fake: &Path, report: &Path, overrides: &[String]) -> Result<()> {
    let kv = load_kv(None, overrides)?;
    let k = kv.get_usize("eval.k", 50)?;
    let alpha = kv.get_f64("eval.alpha", 0.05)?;
    let seed = kv.get_u64("eval.seed", 0)?;
    let mut resolved = KvMap::new();
    resolved.set("eval.k", k);
    resolved.set("eval.alpha", alpha);
    resolved.set("eval.seed", seed);
    resolved.set("paths.real", real.display());
    resolved.set("paths.fake", fake.display());
    resolved.set("paths.report", report.display());
    print_resolved("eval", &resolved);

    let names = |dir: &Path| -> Result<Vec<String>> {
        let mut v: Vec<String> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".wav"))
            .collect();
        v.sort();
        Ok(v)
    };
    let real_names = names(real)?;
    let fake_names = names(fake)?;
    let shared: Vec<String> = real_names
        .iter()
        .filter(|n| fake_names.contains(n))
        .cloned()
        .collect();
    if shared.is_empty() {
        bail!("no matching .wav filenames between the two directories");
    }

    let mut rows = Vec::new();
    let mut real_mels = Vec::new();
    let mut fake_mels = Vec::new();
    let (mut sum_mcd, mut sum_vuv, mut sum_corr, mut corr_count) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for name in &shared {
        let wr = wav_read(&real.join(name))?;
        let wf = wav_read(&fake.join(name))?;
        if wr.len() != wf.len() {
            bail!(
                "{name}: lengths differ ({} vs {}); evaluation assumes time-aligned pairs",
                wr.len(),
                wf.len()
            );
        }
        let m = metrics::mcd(&wr, &wf)?;
        let tr = metrics::extract_f0(&wr)?;
        let tf = metrics::extract_f0(&wf)?;
        let vuv = metrics::vuv_error(&tr, &tf)?;
        let corr = metrics::f0_corr(&tr, &tf).ok();
        sum_mcd += m;
        sum_vuv += vuv;
        if let Some(c) = corr {
            sum_corr += c;
            corr_count += 1;
        }
        real_mels.push(mel_condition(&wr)?);
        fake_mels.push(mel_condition(&wf)?);
        rows.push(format!(
            "{name},{m},{vuv},{},,",
            corr.map(|c| c.to_string()).unwrap_or_default()
        ));
    }
    let (ndb, jsd) = metrics::ndb_jsd(&real_mels, &fake_mels, k, alpha, seed)?;
    let n = shared.len() as f64;
    let mean_corr = if corr_count > 0 {
        (sum_corr / corr_count as f64).to_string()
    } else {
        String::new()
    };
    let summary = format!(
        "summary,{},{},{mean_corr},{ndb},{jsd}",
        sum_mcd / n,
        sum_vuv / n
    );

    let mut f = fs::File::create(report)?;
    writeln!(f, "clip,mcd,vuv,f0corr,ndb,jsd")?;
    for r in &rows {
        writeln!(f, "{r}")?;
    }
    writeln!(f, "{summary}")?;
    println!(
        "evaluated {} pairs: mean MCD {:.4} dB, mean V/UV {:.4}, mean F0 corr {}, NDB {ndb}, JSD {:.6}",
        shared.len(),
        sum_mcd / n,
        sum_vuv / n,
        if mean_corr.is_empty() { "n/a".to_string() } else { mean_corr.clone() },
        jsd
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn gradcheck(hidden: usize, inject_fault: bool) -> Result<()> {
    let hidden = hidden.min(16);
    let mut resolved = KvMap::new();
    resolved.set("gradcheck.hidden", hidden);
    resolved.set("gradcheck.inject_fault", inject_fault);
    resolved.set("gradcheck.tolerance",1e-4);
    print_resolved("gradcheck", &resolved);

    let started = Instant::now();
    let mut checks = verify::full_suite(hidden)?;
    if inject_fault {
        checks.push(verify::injected_fault_check());
    }
    let mut failures = 0usize;
    for c in &checks {
        let status = if c.passed() { "pass" } else { "FAIL" };
        println!("{status}  {:<34} rel_err {:.3e}", c.name, c.max_rel_err);
        if !c.passed() {
            failures += 1;
        }
    }
    println!(
        "{} checks, {} failures, {:.1}s",
        checks.len(),
        failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        bail!("{failures} gradient checks failed");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-rtf
// ---------------------------------------------------------------------------

pub fn bench_rtf(
    steps: usize,
    seconds: f64,
    checkpoint: Option<&Path>,
    seed: u64,
    overrides: &[String],
) -> Result<()> {
    if steps == 0 || seconds <= 0.0 {
        bail!("steps must be >= 1 and seconds positive");
    }
    let kv = load_kv(None, overrides)?;
    let model = match checkpoint {
        Some(dir) => load_denoiser(dir)?.0,
        None => {
            let dcfg = kvcfg::denoiser_from_kv(&kv)?;
            let mut rng = Rng::seed_from(seed);
            Denoiser::<f32>::new(dcfg, &mut rng)?
        }
    };
    let mut resolved = KvMap::new();
    kvcfg::denoiser_to_kv(model.config(), &mut resolved);
    resolved.set("bench.steps", steps);
    resolved.set("bench.seconds", seconds);
    resolved.set("bench.seed", seed);
    print_resolved("bench-rtf", &resolved);

    let sr = linevoc::dsp::SAMPLE_RATE;
    let samples = ((seconds * sr as f64 / HOP as f64).ceil() as usize).max(1) * HOP;
    let spec = SynthDatasetSpec {
        n_clips: 1,
        clip_samples: samples,
        noise_burst_prob: 0.0,
        seed,
        ..Default::default()
    };
    let clip = synth_clip(&spec, 0)?;
    let cond = mel_condition(&clip)?;
    let tokens = samples / model.config().patch_size;
    if tokens > model.config().max_tokens {
        bail!(
            "{seconds} s is {tokens} tokens, above the model's max of {}",
            model.config().max_tokens
        );
    }
    let report = metrics::rtf(&model, &cond, steps, seed)?;
    println!(
        "audio {:.3}s, {} steps: median synth {:.3}s, RTF {:.4} (runs: {})",
        report.audio_seconds,
        steps,
        report.synth_seconds,
        report.rtf,
        report
            .run_seconds
            .iter()
            .map(|t| format!("{t:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}
