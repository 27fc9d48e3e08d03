//! The end-to-end training loop: three-stage schedule with alternating
//! generator/critic updates, Adam optimization, deterministic synthetic
//! data, and bit-exact checkpoint/resume.
//!
//! Stage 1 trains the denoiser on reconstruction only (short clips). Stage 2
//! adds the critics, updating them every step. Stage 3 switches to long
//! clips, updates the critics every fifth step, and damps the generator's
//! adversarial term by 0.2.

use std::collections::BTreeMap;
use std::path::Path;

use crate::critic::{CriticConfig, CriticEnsemble};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{make_training_pair, TrainSchedule};
use crate::dsp::{mel_condition, MelCondition, Waveform, HOP};
use crate::grad::{checkpoint, Graph, Parameterized, Tensor};
use crate::loss::{
    adv_loss_discriminator, adv_loss_generator, diffusion_loss, stft_loss_with,
    total_generator_loss, LossReport, Stage, StftBank,
};
use crate::rng::Rng;
use crate::{Error, Result};

/// Optimization schedule and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Last step of stage 1 (reconstruction only).
    pub stage1_end: usize,
    /// Last step of stage 2 (full adversarial, short clips). May exceed
    /// `total_steps` for runs that never leave an earlier stage.
    pub stage2_end: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Crop lengths in samples; both must be multiples of 256.
    pub clip_samples_short: usize,
    pub clip_samples_long: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Critic update period during stage 3.
    pub d_update_period_stage3: usize,
    /// Steps between checkpoints while running; 0 disables periodic saves.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_end: 10_000,
            stage2_end: 20_000,
            total_steps: 30_000,
            batch_size: 4,
            clip_samples_short: 22_016,
            clip_samples_long: 44_032,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            d_update_period_stage3: 5,
            checkpoint_interval: 0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_end > self.stage2_end {
            return Err(Error::Config(format!(
                "stage1_end {} must not exceed stage2_end {}",
                self.stage1_end, self.stage2_end
            )));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be >= 1".into()));
        }
        if self.clip_samples_short % HOP != 0
            || self.clip_samples_long % HOP != 0
            || self.clip_samples_short == 0
            || self.clip_samples_long == 0
        {
            return Err(Error::Config(format!(
                "clip lengths must be positive multiples of {HOP}"
            )));
        }
        if self.d_update_period_stage3 == 0 {
            return Err(Error::Config("d_update_period_stage3 must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.beta1 < 1.0 && self.beta2 < 1.0 && self.eps > 0.0) {
            return Err(Error::Config("bad optimizer settings".into()));
        }
        Ok(())
    }

    pub fn stage_of(&self, step: usize) -> Stage {
        if step <= self.stage1_end {
            Stage::One
        } else if step <= self.stage2_end {
            Stage::Two
        } else {
            Stage::Three
        }
    }
}

/// Whether the critic updates on this step.
pub fn d_update_due(stage: Stage, step: usize, period_stage3: usize) -> bool {
    match stage {
        Stage::One => false,
        Stage::Two => true,
        Stage::Three => step % period_stage3 == 0,
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam over a parameterized model. Moments are keyed by
/// parameter name; the update count advances once per applied step.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: usize,
    slots: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Apply one update from `grads`. Returns false (and changes nothing) if
    /// any gradient entry is non-finite.
    pub fn step(
        &mut self,
        model: &mut dyn Parameterized<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> bool {
        if grads.values().any(|g| !g.all_finite()) {
            return false;
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(t);
        let bc2 = 1.0 - (self.beta2).powi(t);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        model.visit_params_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else {
                return;
            };
            let (m, v) = self
                .slots
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.value.data_mut();
            for ((pi, mi), (vi, &gi)) in pd
                .iter_mut()
                .zip(md.iter_mut())
                .zip(vd.iter_mut().zip(g.data()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1 as f32;
                let v_hat = *vi / bc2 as f32;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        true
    }

    /// Moments as checkpoint entries under the given prefix.
    fn export(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.slots {
            out.push((format!("{prefix}/m/{name}"), m.clone()));
            out.push((format!("{prefix}/v/{name}"), v.clone()));
        }
        out
    }

    fn import(&mut self, prefix: &str, table: &BTreeMap<String, Tensor<f32>>, steps: usize) {
        self.step_count = steps;
        self.slots.clear();
        let m_prefix = format!("{prefix}/m/");
        for (key, tensor) in table.range(m_prefix.clone()..) {
            let Some(name) = key.strip_prefix(&m_prefix) else {
                break;
            };
            let v_key = format!("{prefix}/v/{name}");
            if let Some(v) = table.get(&v_key) {
                self.slots
                    .insert(name.to_string(), (tensor.clone(), v.clone()));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// Parameters of the harmonic synthetic-speech stand-in corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasetSpec {
    pub n_clips: usize,
    /// Samples per clip; must be a multiple of 256.
    pub clip_samples: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    pub max_harmonics: usize,
    /// Probability that a clip carries one additive noise burst.
    pub noise_burst_prob: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            n_clips: 16,
            clip_samples: 44_032,
            f0_min: 80.0,
            f0_max: 400.0,
            max_harmonics: 8,
            noise_burst_prob: 0.25,
            sample_rate: crate::dsp::SAMPLE_RATE,
            seed: 7,
        }
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 {
            return Err(Error::Config("n_clips must be >= 1".into()));
        }
        if self.clip_samples == 0 || self.clip_samples % HOP != 0 {
            return Err(Error::Config(format!(
                "clip_samples must be a positive multiple of {HOP}"
            )));
        }
        if !(self.f0_min > 0.0 && self.f0_max > self.f0_min) {
            return Err(Error::Config("need 0 < f0_min < f0_max".into()));
        }
        if self.max_harmonics == 0 {
            return Err(Error::Config("max_harmonics must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_burst_prob) {
            return Err(Error::Config("noise_burst_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Clips plus their cached conditioning features.
pub struct Dataset {
    pub clips: Vec<Waveform>,
    pub mels: Vec<MelCondition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Wrap existing waveforms, computing their mel conditions.
    pub fn from_waveforms(clips: Vec<Waveform>) -> Result<Dataset> {
        let mels = clips
            .iter()
            .map(mel_condition)
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { clips, mels })
    }
}

/// One deterministic synthetic clip: a sum of decaying harmonics of a random
/// fundamental under a smooth amplitude envelope, optionally with a short
/// noise burst, peak-normalized to 0.95.
pub fn synth_clip(spec: &SynthDatasetSpec, index: usize) -> Result<Waveform> {
    spec.validate()?;
    let mut rng = Rng::substream_indexed(spec.seed, "data/clip", index as u64);
    let sr = spec.sample_rate as f64;
    let n = spec.clip_samples;
    let f0 = rng.uniform(spec.f0_min, spec.f0_max);
    let nyquist_cap = ((sr * 0.45) / f0).floor() as usize;
    let harmonics = spec.max_harmonics.min(nyquist_cap.max(1));
    let decay = rng.uniform(0.5, 0.85);
    let amps: Vec<f64> = (0..harmonics)
        .map(|h| decay.powi(h as i32) * rng.uniform(0.6, 1.0))
        .collect();
    let phases: Vec<f64> = (0..harmonics)
        .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
        .collect();
    let attack = rng.uniform(0.02, 0.15) * n as f64;
    let release = rng.uniform(0.02, 0.15) * n as f64;
    let am_freq = rng.uniform(0.5, 3.0);
    let am_phase = rng.uniform(0.0, std::f64::consts::TAU);

    let mut samples = vec![0.0f64; n];
    for (i, slot) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut v = 0.0f64;
        for h in 0..harmonics {
            v += amps[h]
                * (std::f64::consts::TAU * f0 * (h as f64 + 1.0) * t + phases[h]).sin();
        }
        let ramp_in = ((i as f64 / attack).min(1.0) * std::f64::consts::FRAC_PI_2).sin();
        let ramp_out =
            (((n - 1 - i) as f64 / release).min(1.0) * std::f64::consts::FRAC_PI_2).sin();
        let am = 1.0 + 0.15 * (std::f64::consts::TAU * am_freq * t + am_phase).sin();
        *slot = v * ramp_in * ramp_out * am;
    }
    if rng.next_f64() < spec.noise_burst_prob {
        let width = (rng.uniform(0.01, 0.05) * sr) as usize;
        let start = rng.below((n - width.min(n - 1)) as u64) as usize;
        for i in 0..width.min(n - start) {
            let fade = (std::f64::consts::PI * i as f64 / width as f64).sin();
            samples[start + i] += 0.08 * fade * rng.gaussian();
        }
    }
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.95 / peak } else { 1.0 };
    Waveform::new(
        samples.iter().map(|&v| (v * scale) as f32).collect(),
        spec.sample_rate,
    )
}

/// The full deterministic corpus with cached mel conditions.
pub fn synth_dataset(spec: &SynthDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let clips = (0..spec.n_clips)
        .map(|i| synth_clip(spec, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_waveforms(clips)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Owns both models, both optimizers, and the random streams of one
/// reproducible training run.
pub struct Trainer {
    pub denoiser: Denoiser<f32>,
    pub critics: CriticEnsemble<f32>,
    cfg: TrainConfig,
    adam_g: Adam,
    adam_d: Adam,
    bank: StftBank<f32>,
    pair_rng: Rng,
    batch_rng: Rng,
    stft_rng: Rng,
    step: usize,
    perm: Vec<u32>,
    cursor: usize,
    /// Number of times the critic ensemble was evaluated.
    pub critic_eval_count: u64,
    /// Critic updates applied, total and within stage 3.
    pub d_update_count: u64,
    pub d_update_count_stage3: u64,
    /// Updates skipped because gradients were non-finite.
    pub skipped_updates: u64,
}

impl Trainer {
    pub fn new(dcfg: DenoiserConfig, ccfg: CriticConfig, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut g_rng = Rng::substream(cfg.seed, "init/denoiser");
        let mut d_rng = Rng::substream(cfg.seed, "init/critic");
        let denoiser = Denoiser::new(dcfg, &mut g_rng)?;
        let critics = CriticEnsemble::new(ccfg, &mut d_rng)?;
        Ok(Trainer {
            denoiser,
            critics,
            adam_g: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            adam_d: Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            bank: StftBank::default_bank()?,
            pair_rng: Rng::substream(cfg.seed, "train/pair"),
            batch_rng: Rng::substream(cfg.seed, "train/batch"),
            stft_rng: Rng::substream(cfg.seed, "train/stft"),
            cfg,
            step: 0,
            perm: Vec::new(),
            cursor: 0,
            critic_eval_count: 0,
            d_update_count: 0,
            d_update_count_stage3: 0,
            skipped_updates: 0,
        })
    }

    /// Replace the spectral-loss bank (tests use a shorter ladder).
    pub fn set_bank(&mut self, bank: StftBank<f32>) {
        self.bank = bank;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn completed_steps(&self) -> usize {
        self.step
    }

    fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            t_train_max: self.denoiser.config().t_train_max,
        }
    }

    /// Next batch of clip indices, cycling through shuffled epochs.
    fn next_batch(&mut self, n_clips: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor >= self.perm.len() {
                let mut perm: Vec<u32> = (0..n_clips as u32).collect();
                self.batch_rng.shuffle(&mut perm);
                self.perm = perm;
                self.cursor = 0;
            }
            batch.push(self.perm[self.cursor] as usize);
            self.cursor += 1;
        }
        batch
    }

    /// Aligned random crop of one clip to `target` samples.
    fn crop(
        &mut self,
        dataset: &Dataset,
        clip: usize,
        target: usize,
    ) -> Result<(Tensor<f32>, MelCondition)> {
        let wave = &dataset.clips[clip];
        let mel = &dataset.mels[clip];
        let len = wave.len();
        let target = target.min(len);
        let max_offset_frames = (len - target) / HOP;
        let off = if max_offset_frames == 0 {
            0
        } else {
            self.batch_rng.below(max_offset_frames as u64 + 1) as usize
        };
        let start = off * HOP;
        let slice = &wave.samples()[start..start + target];
        let x = Tensor::new(&[target], slice.to_vec());
        let mel_crop = mel.slice_frames(off, target / HOP)?;
        Ok((x, mel_crop))
    }

    /// One optimization step over a fresh batch. Advances the step counter
    /// and returns the loss record. A non-finite loss aborts with a
    /// diagnostic; non-finite gradients skip the affected update instead.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossReport> {
        if dataset.is_empty() {
            return Err(Error::Train("empty dataset".into()));
        }
        let step = self.step + 1;
        let stage = self.cfg.stage_of(step);
        let target = match stage {
            Stage::One | Stage::Two => self.cfg.clip_samples_short,
            Stage::Three => self.cfg.clip_samples_long,
        };
        let indices = self.next_batch(dataset.len());
        let mut crops = Vec::with_capacity(indices.len());
        for &ci in &indices {
            crops.push(self.crop(dataset, ci, target)?);
        }
        let schedule = self.schedule();
        let pairs: Vec<(Tensor<f32>, usize, Tensor<f32>)> = crops
            .iter()
            .map(|(x, _)| make_training_pair(x, &mut self.pair_rng, &schedule))
            .collect();
        let inv_batch = 1.0 / indices.len() as f64;

        // Critic update.
        let mut l_adv_d = 0.0f64;
        if d_update_due(stage, step, self.cfg.d_update_period_stage3) {
            let mut grads_d: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
            for ((x_data, mel), (x_t, t, _)) in crops.iter().zip(&pairs) {
                let g = Graph::<f32>::new();
                let x_t_node = g.constant(x_t.clone());
                let x_hat = self.denoiser.forward_node(&g, &x_t_node, mel, *t)?;
                let fake = self.critics.score(&g, &x_hat.detach())?;
                let real_node = g.constant(x_data.clone());
                let real = self.critics.score(&g, &real_node)?;
                self.critic_eval_count += 2;
                let loss = adv_loss_discriminator(&fake.all(), &real.all());
                let v = loss.item() as f64;
                if !v.is_finite() {
                    return Err(self.abort_dump(step, "critic loss", v));
                }
                l_adv_d += v * inv_batch;
                let scaled = loss.scale(inv_batch);
                g.backward(&scaled);
                accumulate_grads(&mut grads_d, g.param_grads(), "critic/");
            }
            if self.adam_d.step(&mut self.critics, &grads_d) {
                self.d_update_count += 1;
                if stage == Stage::Three {
                    self.d_update_count_stage3 += 1;
                }
            } else {
                self.skipped_updates += 1;
                eprintln!("step {step}: skipped critic update (non-finite gradients)");
            }
        }

        // Generator update. One spectral configuration per step.
        let stft_idx = self.stft_rng.below(4) as usize;
        let mut grads_g: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let (mut l_diff, mut l_s, mut l_adv_g, mut l_gen) = (0.0f64, 0.0, 0.0, 0.0);
        for ((x_data, mel), (x_t, t, _)) in crops.iter().zip(&pairs) {
            let g = Graph::<f32>::new();
            let x_t_node = g.constant(x_t.clone());
            let x_hat = self.denoiser.forward_node(&g, &x_t_node, mel, *t)?;
            let x_data_node = g.constant(x_data.clone());
            let ld = diffusion_loss(&x_hat, &x_data_node);
            let ls = stft_loss_with(&g, &x_hat, &x_data_node, &self.bank, stft_idx)?;
            let adv = if stage == Stage::One {
                None
            } else {
                let scores = self.critics.score(&g, &x_hat)?;
                self.critic_eval_count += 1;
                Some(adv_loss_generator(&scores.all()))
            };
            let lgen = total_generator_loss(adv.as_ref(), &ls, &ld, stage)?;
            let (vd, vs, vg) = (
                ld.item() as f64,
                ls.item() as f64,
                lgen.item() as f64,
            );
            if !vd.is_finite() || !vs.is_finite() || !vg.is_finite() {
                return Err(self.abort_dump(step, "generator loss", vd + vs + vg));
            }
            l_diff += vd * inv_batch;
            l_s += vs * inv_batch;
            l_gen += vg * inv_batch;
            if let Some(a) = &adv {
                l_adv_g += a.item() as f64 * inv_batch;
            }
            let scaled = lgen.scale(inv_batch);
            g.backward(&scaled);
            accumulate_grads(&mut grads_g, g.param_grads(), "denoiser/");
        }
        if !self.adam_g.step(&mut self.denoiser, &grads_g) {
            self.skipped_updates += 1;
            eprintln!("step {step}: skipped generator update (non-finite gradients)");
        }

        self.step = step;
        Ok(LossReport {
            step,
            stage,
            l_diff,
            l_s,
            l_adv_g,
            l_adv_d,
            l_gen,
            stft_cfg_index: stft_idx,
        })
    }

    fn abort_dump(&self, step: usize, what: &str, value: f64) -> Error {
        let mut max_p = 0.0f64;
        self.denoiser.visit_params(&mut |p| {
            max_p = max_p.max(p.value.max_abs());
        });
        Error::Train(format!(
            "non-finite {what} at step {step} (value {value}); max |denoiser param| = {max_p}; \
             stage {:?}; aborting before any update",
            self.cfg.stage_of(step)
        ))
    }

    /// Run up to `total_steps`, reporting each step to `sink` and writing
    /// periodic plus final checkpoints under `ckpt_dir` when provided.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        ckpt_dir: Option<&Path>,
        sink: &mut dyn FnMut(&LossReport) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.total_steps {
            let report = self.train_step(dataset)?;
            sink(&report)?;
            if let Some(dir) = ckpt_dir {
                let at_interval = self.cfg.checkpoint_interval > 0
                    && self.step % self.cfg.checkpoint_interval == 0;
                if at_interval && self.step < self.cfg.total_steps {
                    self.save_checkpoint(&dir.join(format!("step_{:06}", self.step)))?;
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            self.save_checkpoint(&dir.join("final"))?;
        }
        Ok(())
    }

    /// Persist models, optimizer moments, random streams, and the batch
    /// cursor; resuming reproduces the next step bit-exactly.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor<f32>)> = Vec::new();
        self.denoiser.visit_params(&mut |p| {
            entries.push((p.name.clone(), p.value.clone()));
        });
        self.critics.visit_params(&mut |p| {
            entries.push((p.name.clone(), p.value.clone()));
        });
        entries.extend(self.adam_g.export("opt/g"));
        entries.extend(self.adam_d.export("opt/d"));
        let meta = serde_json::json!({
            "step": self.step,
            "adam_g_steps": self.adam_g.step_count(),
            "adam_d_steps": self.adam_d.step_count(),
            "d_update_count": self.d_update_count,
            "d_update_count_stage3": self.d_update_count_stage3,
            "critic_eval_count": self.critic_eval_count,
            "skipped_updates": self.skipped_updates,
            "rng": {
                "pair": self.pair_rng.state(),
                "batch": self.batch_rng.state(),
                "stft": self.stft_rng.state(),
            },
            "perm": self.perm,
            "cursor": self.cursor,
        });
        let refs: Vec<(String, &Tensor<f32>)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(dir, &refs, meta)
    }

    /// Rebuild a trainer from a checkpoint written by [`Self::save_checkpoint`].
    pub fn resume(
        dcfg: DenoiserConfig,
        ccfg: CriticConfig,
        cfg: TrainConfig,
        dir: &Path,
    ) -> Result<Trainer> {
        let mut trainer = Trainer::new(dcfg, ccfg, cfg)?;
        let (entries, meta) = checkpoint::load(dir)?;
        let table: BTreeMap<String, Tensor<f32>> = entries.into_iter().collect();
        trainer.denoiser.load_named(&table)?;
        trainer.critics.load_named(&table)?;
        let steps_g = meta["adam_g_steps"].as_u64().unwrap_or(0) as usize;
        let steps_d = meta["adam_d_steps"].as_u64().unwrap_or(0) as usize;
        trainer.adam_g.import("opt/g", &table, steps_g);
        trainer.adam_d.import("opt/d", &table, steps_d);
        trainer.step = meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing step in checkpoint meta".into()))?
            as usize;
        trainer.d_update_count = meta["d_update_count"].as_u64().unwrap_or(0);
        trainer.d_update_count_stage3 = meta["d_update_count_stage3"].as_u64().unwrap_or(0);
        trainer.critic_eval_count = meta["critic_eval_count"].as_u64().unwrap_or(0);
        trainer.skipped_updates = meta["skipped_updates"].as_u64().unwrap_or(0);
        let rng_state = |key: &str| -> Result<[u64; 4]> {
            let arr = meta["rng"][key]
                .as_array()
                .ok_or_else(|| Error::Checkpoint(format!("missing rng state {key}")))?;
            let mut out = [0u64; 4];
            for (slot, v) in out.iter_mut().zip(arr) {
                *slot = v
                    .as_u64()
                    .ok_or_else(|| Error::Checkpoint("bad rng word".into()))?;
            }
            Ok(out)
        };
        trainer.pair_rng = Rng::from_state(rng_state("pair")?);
        trainer.batch_rng = Rng::from_state(rng_state("batch")?);
        trainer.stft_rng = Rng::from_state(rng_state("stft")?);
        trainer.perm = meta["perm"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64().map(|x| x as u32)).collect())
            .unwrap_or_default();
        trainer.cursor = meta["cursor"].as_u64().unwrap_or(0) as usize;
        Ok(trainer)
    }
}

fn accumulate_grads(
    into: &mut BTreeMap<String, Tensor<f32>>,
    grads: Vec<(String, Tensor<f32>)>,
    prefix: &str,
) {
    for (name, g) in grads {
        if !name.starts_with(prefix) {
            continue;
        }
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}
