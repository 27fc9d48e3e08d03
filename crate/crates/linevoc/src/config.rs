//! Flat `key = value` configuration text: one assignment per line, `#`
//! comments, later keys override earlier ones. Every experiment setting
//! round-trips through this format so runs stay diffable.

use std::collections::BTreeMap;

use crate::critic::CriticConfig;
use crate::denoiser::DenoiserConfig;
use crate::dsp::SpectrogramConfig;
use crate::train::{SynthDatasetSpec, TrainConfig};
use crate::{Error, Result};

/// Ordered key-value bag with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        KvMap::default()
    }

    /// Parse `key = value` lines. Unknown keys are preserved; callers decide
    /// what they need.
    pub fn parse(text: &str) -> Result<KvMap> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvMap { entries })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Apply a `key=value` override string (CLI `--set`).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::Config(format!(
                "override must be key=value, got {assignment:?}"
            )));
        };
        self.entries
            .insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    fn parse_with<T, F: Fn(&str) -> Option<T>>(&self, key: &str, default: T, f: F) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(raw) => f(raw).ok_or_else(|| {
                Error::Config(format!("key {key}: cannot parse value {raw:?}"))
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_string(&self, key: &str, default: &str) -> String {
        self.entries
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    /// Comma-separated list of integers.
    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.entries.get(key) {
            None => Ok(default.to_vec()),
            Some(raw) => raw
                .split(',')
                .map(|p| {
                    p.trim().parse::<usize>().map_err(|_| {
                        Error::Config(format!("key {key}: bad list element {p:?}"))
                    })
                })
                .collect(),
        }
    }
}

/// Read a denoiser config from `denoiser.*` keys, defaulting absent fields.
pub fn denoiser_from_kv(kv: &KvMap) -> Result<DenoiserConfig> {
    let d = DenoiserConfig::default();
    let cfg = DenoiserConfig {
        patch_size: kv.get_usize("denoiser.patch_size", d.patch_size)?,
        hidden_dim: kv.get_usize("denoiser.hidden_dim", d.hidden_dim)?,
        n_layers: kv.get_usize("denoiser.n_layers", d.n_layers)?,
        n_heads: kv.get_usize("denoiser.n_heads", d.n_heads)?,
        step_pe_dim: kv.get_usize("denoiser.step_pe_dim", d.step_pe_dim)?,
        postconv_channels: kv.get_usize("denoiser.postconv_channels", d.postconv_channels)?,
        lvc_kernel: kv.get_usize("denoiser.lvc_kernel", d.lvc_kernel)?,
        lvc_layers: kv.get_usize("denoiser.lvc_layers", d.lvc_layers)?,
        max_tokens: kv.get_usize("denoiser.max_tokens", d.max_tokens)?,
        t_train_max: kv.get_usize("denoiser.t_train_max", d.t_train_max)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn denoiser_to_kv(cfg: &DenoiserConfig, kv: &mut KvMap) {
    kv.set("denoiser.patch_size", cfg.patch_size);
    kv.set("denoiser.hidden_dim", cfg.hidden_dim);
    kv.set("denoiser.n_layers", cfg.n_layers);
    kv.set("denoiser.n_heads", cfg.n_heads);
    kv.set("denoiser.step_pe_dim", cfg.step_pe_dim);
    kv.set("denoiser.postconv_channels", cfg.postconv_channels);
    kv.set("denoiser.lvc_kernel", cfg.lvc_kernel);
    kv.set("denoiser.lvc_layers", cfg.lvc_layers);
    kv.set("denoiser.max_tokens", cfg.max_tokens);
    kv.set("denoiser.t_train_max", cfg.t_train_max);
}

pub fn critic_from_kv(kv: &KvMap) -> Result<CriticConfig> {
    let d = CriticConfig::default();
    let cfg = CriticConfig {
        msd_scales: kv.get_usize_list("critic.msd_scales", &d.msd_scales)?,
        mpd_periods: kv.get_usize_list("critic.mpd_periods", &d.mpd_periods)?,
        spectral_cfg: SpectrogramConfig {
            n_fft: kv.get_usize("critic.spectral_n_fft", d.spectral_cfg.n_fft)?,
            win_length: kv.get_usize("critic.spectral_win", d.spectral_cfg.win_length)?,
            hop_length: kv.get_usize("critic.spectral_hop", d.spectral_cfg.hop_length)?,
        },
        spectral_widths: kv.get_usize_list("critic.spectral_widths", &d.spectral_widths)?,
        msd_widths: kv.get_usize_list("critic.msd_widths", &d.msd_widths)?,
        mpd_widths: kv.get_usize_list("critic.mpd_widths", &d.mpd_widths)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn critic_to_kv(cfg: &CriticConfig, kv: &mut KvMap) {
    let join = |xs: &[usize]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    kv.set("critic.msd_scales", join(&cfg.msd_scales));
    kv.set("critic.mpd_periods", join(&cfg.mpd_periods));
    kv.set("critic.spectral_n_fft", cfg.spectral_cfg.n_fft);
    kv.set("critic.spectral_win", cfg.spectral_cfg.win_length);
    kv.set("critic.spectral_hop", cfg.spectral_cfg.hop_length);
    kv.set("critic.spectral_widths", join(&cfg.spectral_widths));
    kv.set("critic.msd_widths", join(&cfg.msd_widths));
    kv.set("critic.mpd_widths", join(&cfg.mpd_widths));
}

pub fn train_from_kv(kv: &KvMap) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        stage1_end: kv.get_usize("train.stage1_end", d.stage1_end)?,
        stage2_end: kv.get_usize("train.stage2_end", d.stage2_end)?,
        total_steps: kv.get_usize("train.total_steps", d.total_steps)?,
        batch_size: kv.get_usize("train.batch_size", d.batch_size)?,
        clip_samples_short: kv.get_usize("train.clip_samples_short", d.clip_samples_short)?,
        clip_samples_long: kv.get_usize("train.clip_samples_long", d.clip_samples_long)?,
        lr: kv.get_f64("train.lr", d.lr)?,
        beta1: kv.get_f64("train.beta1", d.beta1)?,
        beta2: kv.get_f64("train.beta2", d.beta2)?,
        eps: kv.get_f64("train.eps", d.eps)?,
        d_update_period_stage3: kv.get_usize(
            "train.d_update_period_stage3",
            d.d_update_period_stage3,
        )?,
        checkpoint_interval: kv.get_usize("train.checkpoint_interval", d.checkpoint_interval)?,
        seed: kv.get_u64("train.seed", d.seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_to_kv(cfg: &TrainConfig, kv: &mut KvMap) {
    kv.set("train.stage1_end", cfg.stage1_end);
    kv.set("train.stage2_end", cfg.stage2_end);
    kv.set("train.total_steps", cfg.total_steps);
    kv.set("train.batch_size", cfg.batch_size);
    kv.set("train.clip_samples_short", cfg.clip_samples_short);
    kv.set("train.clip_samples_long", cfg.clip_samples_long);
    kv.set("train.lr", cfg.lr);
    kv.set("train.beta1", cfg.beta1);
    kv.set("train.beta2", cfg.beta2);
    kv.set("train.eps", cfg.eps);
    kv.set("train.d_update_period_stage3", cfg.d_update_period_stage3);
    kv.set("train.checkpoint_interval", cfg.checkpoint_interval);
    kv.set("train.seed", cfg.seed);
}

pub fn dataset_from_kv(kv: &KvMap) -> Result<SynthDatasetSpec> {
    let d = SynthDatasetSpec::default();
    let spec = SynthDatasetSpec {
        n_clips: kv.get_usize("data.n_clips", d.n_clips)?,
        clip_samples: kv.get_usize("data.clip_samples", d.clip_samples)?,
        f0_min: kv.get_f64("data.f0_min", d.f0_min)?,
        f0_max: kv.get_f64("data.f0_max", d.f0_max)?,
        max_harmonics: kv.get_usize("data.max_harmonics", d.max_harmonics)?,
        noise_burst_prob: kv.get_f64("data.noise_burst_prob", d.noise_burst_prob)?,
        sample_rate: kv.get_u64("data.sample_rate", d.sample_rate as u64)? as u32,
        seed: kv.get_u64("data.seed", d.seed)?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn dataset_to_kv(spec: &SynthDatasetSpec, kv: &mut KvMap) {
    kv.set("data.n_clips", spec.n_clips);
    kv.set("data.clip_samples", spec.clip_samples);
    kv.set("data.f0_min", spec.f0_min);
    kv.set("data.f0_max", spec.f0_max);
    kv.set("data.max_harmonics", spec.max_harmonics);
    kv.set("data.noise_burst_prob", spec.noise_burst_prob);
    kv.set("data.sample_rate", spec.sample_rate);
    kv.set("data.seed", spec.seed);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_roundtrip() {
        let text = "# comment\n a = 1 \n\nb.c = hello world\n";
        let kv = KvMap::parse(text).unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b.c"), Some("hello world"));
        let rendered = kv.render();
        let back = KvMap::parse(&rendered).unwrap();
        assert_eq!(back, kv);
    }

    #[test]
    fn bad_lines_and_values_error() {
        assert!(KvMap::parse("not an assignment").is_err());
        let kv = KvMap::parse("train.lr = fast").unwrap();
        assert!(train_from_kv(&kv).is_err());
    }

    #[test]
    fn typed_configs_roundtrip_through_kv() {
        let mut kv = KvMap::new();
        let dcfg = DenoiserConfig {
            hidden_dim: 64,
            n_layers: 2,
            ..Default::default()
        };
        denoiser_to_kv(&dcfg, &mut kv);
        let tcfg = TrainConfig {
            total_steps: 123,
            lr: 5e-4,
            ..Default::default()
        };
        train_to_kv(&tcfg, &mut kv);
        let ccfg = CriticConfig::default();
        critic_to_kv(&ccfg, &mut kv);
        let spec = SynthDatasetSpec {
            n_clips: 4,
            ..Default::default()
        };
        dataset_to_kv(&spec, &mut kv);

        assert_eq!(denoiser_from_kv(&kv).unwrap(), dcfg);
        assert_eq!(train_from_kv(&kv).unwrap(), tcfg);
        assert_eq!(critic_from_kv(&kv).unwrap(), ccfg);
        assert_eq!(dataset_from_kv(&kv).unwrap(), spec);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut kv = KvMap::parse("train.total_steps = 10").unwrap();
        kv.apply_override("train.total_steps=200").unwrap();
        assert_eq!(train_from_kv(&kv).unwrap().total_steps, 200);
        assert!(kv.apply_override("garbage").is_err());
    }

    #[test]
    fn missing_keys_fall_back_to_defaults() {
        let kv = KvMap::new();
        assert_eq!(
            denoiser_from_kv(&kv).unwrap(),
            DenoiserConfig::default()
        );
        assert_eq!(train_from_kv(&kv).unwrap(), TrainConfig::default());
    }
}
