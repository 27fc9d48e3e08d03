//! The three-discriminator ensemble applied to predicted audio: one
//! spectral-domain critic over the log-magnitude STFT and two time-domain
//! critics (multi-scale and multi-period). Each sub-critic ends in a
//! mean-pooled scalar score; the adversarial losses average the
//! least-squares terms over all sub-critics.

use crate::dsp::{DftBasis, SpectrogramConfig};
use crate::grad::{Graph, Node, Param, Parameterized, Scalar, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Ensemble architecture settings. The defaults are a desk-scale shrink of
/// the usual GAN-vocoder stacks; wider/full-size variants are reachable
/// through the config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticConfig {
    pub msd_scales: Vec<usize>,
    pub mpd_periods: Vec<usize>,
    pub spectral_cfg: SpectrogramConfig,
    pub spectral_widths: Vec<usize>,
    pub msd_widths: Vec<usize>,
    pub mpd_widths: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            msd_scales: vec![1, 2],
            mpd_periods: vec![2, 3],
            spectral_cfg: SpectrogramConfig {
                n_fft: 512,
                win_length: 512,
                hop_length: 128,
            },
            spectral_widths: vec![16, 32, 64, 64],
            msd_widths: vec![16, 32, 64, 64, 64],
            mpd_widths: vec![16, 32, 64, 64],
        }
    }
}

impl CriticConfig {
    /// Minimal dimensions for gradient checking.
    pub fn tiny() -> Self {
        CriticConfig {
            msd_scales: vec![1, 2],
            mpd_periods: vec![2, 3],
            spectral_cfg: SpectrogramConfig {
                n_fft: 64,
                win_length: 64,
                hop_length: 16,
            },
            spectral_widths: vec![2, 2],
            msd_widths: vec![2, 2],
            mpd_widths: vec![2, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.msd_scales.is_empty() || self.msd_scales.iter().any(|&s| s == 0) {
            return Err(Error::Config("msd scales must be >= 1".into()));
        }
        if self.mpd_periods.is_empty() || self.mpd_periods.iter().any(|&p| p < 2) {
            return Err(Error::Config("mpd periods must be >= 2".into()));
        }
        self.spectral_cfg.validate()?;
        for w in self
            .spectral_widths
            .iter()
            .chain(&self.msd_widths)
            .chain(&self.mpd_widths)
        {
            if *w == 0 {
                return Err(Error::Config("critic widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Total number of sub-critic scores.
    pub fn score_count(&self) -> usize {
        1 + self.msd_scales.len() + self.mpd_periods.len()
    }
}

struct ConvStage<S: Scalar> {
    w: Param<S>,
    b: Param<S>,
}

impl<S: Scalar> ConvStage<S> {
    fn init1d(name: &str, c_in: usize, c_out: usize, k: usize, groups: usize, rng: &mut Rng) -> Self {
        let fan_in = (c_in / groups) * k;
        let limit = 1.0 / (fan_in as f64).sqrt();
        ConvStage {
            w: Param::new(
                format!("{name}/w"),
                Tensor::rand_uniform(&[c_out, c_in / groups, k], limit, rng),
            ),
            b: Param::new(format!("{name}/b"), Tensor::zeros(&[c_out])),
        }
    }

    fn init2d(name: &str, c_in: usize, c_out: usize, kh: usize, kw: usize, rng: &mut Rng) -> Self {
        let fan_in = c_in * kh * kw;
        let limit = 1.0 / (fan_in as f64).sqrt();
        ConvStage {
            w: Param::new(
                format!("{name}/w"),
                Tensor::rand_uniform(&[c_out, c_in, kh, kw], limit, rng),
            ),
            b: Param::new(format!("{name}/b"), Tensor::zeros(&[c_out])),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        f(&self.w);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

const LEAKY_SLOPE: f64 = 0.2;

/// Judges samples in the frequency domain: a 2-D convolution stack over the
/// log-magnitude spectrogram.
pub struct SpectralCritic<S: Scalar> {
    cfg: SpectrogramConfig,
    window: Tensor<S>,
    cos: Tensor<S>,
    sin: Tensor<S>,
    stages: Vec<ConvStage<S>>,
    head: ConvStage<S>,
}

impl<S: Scalar> SpectralCritic<S> {
    fn new(name: &str, cfg: SpectrogramConfig, widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let basis = DftBasis::build(cfg)?;
        let bins = cfg.bins();
        let mut stages = Vec::new();
        let mut c_prev = 1usize;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(ConvStage::init2d(
                &format!("{name}/stage{i}"),
                c_prev,
                w,
                3,
                3,
                rng,
            ));
            c_prev = w;
        }
        let head = ConvStage::init2d(&format!("{name}/head"), c_prev, 1, 3, 3, rng);
        Ok(SpectralCritic {
            cfg,
            window: Tensor::from_f64_slice(&[cfg.n_fft], &basis.window),
            cos: Tensor::from_f64_slice(&[cfg.n_fft, bins], &basis.cos),
            sin: Tensor::from_f64_slice(&[cfg.n_fft, bins], &basis.sin),
            stages,
            head,
        })
    }

    /// Scalar score for a 1-D waveform node.
    pub fn score(&self, g: &Graph<S>, w: &Node<S>) -> Result<Node<S>> {
        let len = w.numel();
        if len < self.cfg.n_fft {
            return Err(Error::Shape(format!(
                "spectral critic needs at least {} samples, got {len}",
                self.cfg.n_fft
            )));
        }
        let frames = w.frame1d(self.cfg.n_fft, self.cfg.hop_length);
        let num_frames = frames.shape()[0];
        let bins = self.cfg.bins();
        let windowed = frames.mul(&g.constant(self.window.clone()));
        let re = windowed.matmul(&g.constant(self.cos.clone()));
        let im = windowed.matmul(&g.constant(self.sin.clone()));
        let mag = re.square().add(&im.square()).sqrt();
        let logm = mag.add_scalar(1e-5).log();
        let mut x = logm.reshape(&[1, num_frames, bins]);
        for stage in &self.stages {
            let w = g.param(&stage.w);
            let b = g.param(&stage.b);
            x = x.conv2d(&w, Some(&b), (2, 2), (1, 1)).leaky_relu(LEAKY_SLOPE);
        }
        let hw = g.param(&self.head.w);
        let hb = g.param(&self.head.b);
        let map = x.conv2d(&hw, Some(&hb), (1, 1), (1, 1));
        Ok(map.mean())
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        for s in &self.stages {
            s.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

/// Time-domain critic bank over average-pooled copies of the waveform.
pub struct MultiScaleCritic<S: Scalar> {
    scales: Vec<usize>,
    /// One conv stack per scale.
    stacks: Vec<Vec<ConvStage<S>>>,
    heads: Vec<ConvStage<S>>,
    kernels: Vec<usize>,
    strides: Vec<usize>,
    groups: Vec<usize>,
}

impl<S: Scalar> MultiScaleCritic<S> {
    fn new(name: &str, scales: &[usize], widths: &[usize], rng: &mut Rng) -> Self {
        // Kernel/stride ladder, truncated to the configured depth.
        let full_kernels = [15usize, 15, 15, 15, 5];
        let full_strides = [2usize, 2, 4, 4, 1];
        let n = widths.len().min(5);
        let kernels: Vec<usize> = full_kernels[..n].to_vec();
        let strides: Vec<usize> = full_strides[..n].to_vec();
        let mut stacks = Vec::new();
        let mut heads = Vec::new();
        let mut groups_used = Vec::new();
        for (si, &scale) in scales.iter().enumerate() {
            let mut stack = Vec::new();
            let mut c_prev = 1usize;
            let mut stage_groups = Vec::new();
            for (i, &w) in widths[..n].iter().enumerate() {
                // Grouped convolutions in the middle of the stack when the
                // widths allow it.
                let groups = if i >= 2 && c_prev % 4 == 0 && w % 4 == 0 { 4 } else { 1 };
                stage_groups.push(groups);
                stack.push(ConvStage::init1d(
                    &format!("{name}/scale{scale}/stage{i}"),
                    c_prev,
                    w,
                    kernels[i],
                    groups,
                    rng,
                ));
                c_prev = w;
            }
            if si == 0 {
                groups_used = stage_groups;
            }
            stacks.push(stack);
            heads.push(ConvStage::init1d(
                &format!("{name}/scale{scale}/head"),
                c_prev,
                1,
                3,
                1,
                rng,
            ));
        }
        MultiScaleCritic {
            scales: scales.to_vec(),
            stacks,
            heads,
            kernels,
            strides,
            groups: groups_used,
        }
    }

    /// One score per scale.
    pub fn scores(&self, g: &Graph<S>, w: &Node<S>) -> Result<Vec<Node<S>>> {
        let len = w.numel();
        let max_scale = *self.scales.iter().max().unwrap();
        if len % max_scale != 0 {
            return Err(Error::Shape(format!(
                "waveform length {len} not divisible by max scale {max_scale}"
            )));
        }
        let base = w.reshape(&[1, len]);
        let mut out = Vec::new();
        for (si, &scale) in self.scales.iter().enumerate() {
            let mut x = if scale > 1 {
                base.avg_pool1d(scale, scale)
            } else {
                base.clone()
            };
            if x.shape()[1] < self.kernels[0] {
                return Err(Error::Shape(format!(
                    "scale {scale} input of {} samples shorter than kernel {}",
                    x.shape()[1],
                    self.kernels[0]
                )));
            }
            for (i, stage) in self.stacks[si].iter().enumerate() {
                let wp = g.param(&stage.w);
                let bp = g.param(&stage.b);
                x = x
                    .conv1d(&wp, Some(&bp), self.strides[i], self.kernels[i] / 2, 1, self.groups[i])
                    .leaky_relu(LEAKY_SLOPE);
            }
            let hw = g.param(&self.heads[si].w);
            let hb = g.param(&self.heads[si].b);
            let map = x.conv1d(&hw, Some(&hb), 1, 1, 1, 1);
            out.push(map.mean());
        }
        Ok(out)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        for (stack, head) in self.stacks.iter().zip(&self.heads) {
            for s in stack {
                s.visit(f);
            }
            head.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for (stack, head) in self.stacks.iter_mut().zip(&mut self.heads) {
            for s in stack {
                s.visit_mut(f);
            }
            head.visit_mut(f);
        }
    }
}

/// Reshape a 1-D signal into its period view: row `i` holds samples
/// congruent to `i` mod `p`, tail zero-padded to a multiple of `p`.
pub fn period_view<S: Scalar>(g: &Graph<S>, w: &Node<S>, period: usize) -> Node<S> {
    let len = w.numel();
    let rem = len % period;
    let padded = if rem == 0 {
        w.clone()
    } else {
        let pad = g.constant(Tensor::zeros(&[period - rem]));
        Node::concat(&[w.clone(), pad], 0)
    };
    let cols = padded.numel() / period;
    padded.reshape(&[cols, period]).transpose()
}

/// Time-domain critic bank over period-strided views of the waveform.
pub struct MultiPeriodCritic<S: Scalar> {
    periods: Vec<usize>,
    stacks: Vec<Vec<ConvStage<S>>>,
    heads: Vec<ConvStage<S>>,
}

impl<S: Scalar> MultiPeriodCritic<S> {
    fn new(name: &str, periods: &[usize], widths: &[usize], rng: &mut Rng) -> Self {
        let mut stacks = Vec::new();
        let mut heads = Vec::new();
        for &p in periods {
            let mut stack = Vec::new();
            let mut c_prev = 1usize;
            for (i, &w) in widths.iter().enumerate() {
                stack.push(ConvStage::init2d(
                    &format!("{name}/period{p}/stage{i}"),
                    c_prev,
                    w,
                    1,
                    5,
                    rng,
                ));
                c_prev = w;
            }
            heads.push(ConvStage::init2d(
                &format!("{name}/period{p}/head"),
                c_prev,
                1,
                1,
                3,
                rng,
            ));
            stacks.push(stack);
        }
        MultiPeriodCritic {
            periods: periods.to_vec(),
            stacks,
            heads,
        }
    }

    /// One score per period.
    pub fn scores(&self, g: &Graph<S>, w: &Node<S>) -> Result<Vec<Node<S>>> {
        let len = w.numel();
        if len == 0 {
            return Err(Error::Shape("empty input to period critic".into()));
        }
        let max_period = *self.periods.iter().max().unwrap();
        if len < max_period {
            return Err(Error::Shape(format!(
                "waveform of {len} samples shorter than max period {max_period}"
            )));
        }
        let mut out = Vec::new();
        for (pi, &p) in self.periods.iter().enumerate() {
            let view = period_view(g, w, p);
            let cols = view.shape()[1];
            if cols < 5 {
                return Err(Error::Shape(format!(
                    "period {p} view has only {cols} columns"
                )));
            }
            let mut x = view.reshape(&[1, p, cols]);
            for stage in &self.stacks[pi] {
                let wp = g.param(&stage.w);
                let bp = g.param(&stage.b);
                x = x
                    .conv2d(&wp, Some(&bp), (1, 3), (0, 2))
                    .leaky_relu(LEAKY_SLOPE);
            }
            let hw = g.param(&self.heads[pi].w);
            let hb = g.param(&self.heads[pi].b);
            let map = x.conv2d(&hw, Some(&hb), (1, 1), (0, 1));
            out.push(map.mean());
        }
        Ok(out)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<S>)) {
        for (stack, head) in self.stacks.iter().zip(&self.heads) {
            for s in stack {
                s.visit(f);
            }
            head.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for (stack, head) in self.stacks.iter_mut().zip(&mut self.heads) {
            for s in stack {
                s.visit_mut(f);
            }
            head.visit_mut(f);
        }
    }
}

/// Per-sub-critic scalar score nodes from one ensemble evaluation.
pub struct CriticScores<S: Scalar> {
    pub spectral: Node<S>,
    pub msd: Vec<Node<S>>,
    pub mpd: Vec<Node<S>>,
}

impl<S: Scalar> CriticScores<S> {
    /// All scores in a fixed order: spectral, scales, periods.
    pub fn all(&self) -> Vec<Node<S>> {
        let mut v = vec![self.spectral.clone()];
        v.extend(self.msd.iter().cloned());
        v.extend(self.mpd.iter().cloned());
        v
    }

    pub fn values(&self) -> Vec<f64> {
        self.all().iter().map(|n| n.item().to_f64()).collect()
    }
}

/// The full three-critic ensemble.
pub struct CriticEnsemble<S: Scalar> {
    cfg: CriticConfig,
    spectral: SpectralCritic<S>,
    msd: MultiScaleCritic<S>,
    mpd: MultiPeriodCritic<S>,
}

impl<S: Scalar> CriticEnsemble<S> {
    pub fn new(cfg: CriticConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(CriticEnsemble {
            spectral: SpectralCritic::new(
                "critic/spectral",
                cfg.spectral_cfg,
                &cfg.spectral_widths,
                rng,
            )?,
            msd: MultiScaleCritic::new("critic/msd", &cfg.msd_scales, &cfg.msd_widths, rng),
            mpd: MultiPeriodCritic::new("critic/mpd", &cfg.mpd_periods, &cfg.mpd_widths, rng),
            cfg,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.cfg
    }

    /// Score a waveform node with every sub-critic.
    pub fn score(&self, g: &Graph<S>, w: &Node<S>) -> Result<CriticScores<S>> {
        Ok(CriticScores {
            spectral: self.spectral.score(g, w)?,
            msd: self.msd.scores(g, w)?,
            mpd: self.mpd.scores(g, w)?,
        })
    }
}

impl<S: Scalar> Parameterized<S> for CriticEnsemble<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<S>)) {
        self.spectral.visit(f);
        self.msd.visit(f);
        self.mpd.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.spectral.visit_mut(f);
        self.msd.visit_mut(f);
        self.mpd.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::randomize_params;
    use crate::grad::check::{grad_check_with, GRAD_TOL};

    fn rand_wave(len: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::seed_from(seed);
        Tensor::from_fn(&[len], |_| rng.uniform(-0.8, 0.8))
    }

    #[test]
    fn ensemble_emits_five_finite_scores_at_defaults() {
        let mut rng = Rng::seed_from(1);
        let ensemble = CriticEnsemble::<f64>::new(CriticConfig::default(), &mut rng).unwrap();
        assert_eq!(ensemble.config().score_count(), 5);
        let g = Graph::new();
        let w = g.constant(rand_wave(2048, 3));
        let scores = ensemble.score(&g, &w).unwrap();
        let vals = scores.values();
        assert_eq!(vals.len(), 5);
        assert!(vals.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scores_are_deterministic_under_fixed_weights() {
        let mut rng = Rng::seed_from(5);
        let ensemble = CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng).unwrap();
        let w = rand_wave(512, 9);
        let run = || {
            let g = Graph::new();
            let wn = g.constant(w.clone());
            ensemble.score(&g, &wn).unwrap().values()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn msd_scales_disagree_on_structured_input() {
        let mut rng = Rng::seed_from(7);
        let ensemble = CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng).unwrap();
        let g = Graph::new();
        let w = g.constant(rand_wave(512, 11));
        let scores = ensemble.msd.scores(&g, &w).unwrap();
        let a = scores[0].item();
        let b = scores[1].item();
        assert!((a - b).abs() > 1e-9, "scale scores coincide: {a} vs {b}");
    }

    #[test]
    fn constant_zero_input_gives_finite_bias_path_score() {
        let mut rng = Rng::seed_from(13);
        let ensemble = CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng).unwrap();
        let g = Graph::new();
        let w = g.constant(Tensor::zeros(&[512]));
        let scores = ensemble.score(&g, &w).unwrap();
        assert!(scores.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn period_view_matches_reshape_definition() {
        let g = Graph::<f64>::new();
        let w = g.constant(Tensor::from_f64_slice(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let view = period_view(&g, &w, 2);
        // [[a, c], [b, d]]
        assert_eq!(view.shape(), vec![2, 2]);
        assert_eq!(view.value().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn period_view_pads_tail_with_zeros() {
        let g = Graph::<f64>::new();
        let w = g.constant(Tensor::from_f64_slice(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let view = period_view(&g, &w, 2);
        assert_eq!(view.shape(), vec![2, 3]);
        assert_eq!(view.value().data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 0.0]);
    }

    #[test]
    fn too_short_inputs_are_rejected() {
        let mut rng = Rng::seed_from(17);
        let ensemble = CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng).unwrap();
        let g = Graph::new();
        let w = g.constant(rand_wave(32, 1));
        assert!(ensemble.spectral.score(&g, &w).is_err());
        let odd = g.constant(rand_wave(33, 2));
        assert!(ensemble.msd.scores(&g, &odd).is_err());
    }

    #[test]
    fn detached_input_blocks_upstream_gradients() {
        // An upstream "generator" parameter feeding a detached waveform must
        // see zero gradient from the critic loss.
        let mut rng = Rng::seed_from(19);
        let ensemble = CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng).unwrap();
        let g = Graph::new();
        let gen_param = Param::new("gen/w", rand_wave(512, 23));
        let gen_node = g.param(&gen_param);
        let fake = gen_node.scale(0.9);
        let scores = ensemble.score(&g, &fake.detach()).unwrap();
        let loss = Node::concat(&scores.all(), 0).square().mean();
        g.backward(&loss);
        let grads = g.param_grads();
        let gen_grad = grads.iter().find(|(n, _)| n == "gen/w").unwrap();
        assert_eq!(gen_grad.1.max_abs(), 0.0);
        // At least one critic parameter did get gradient.
        let critic_touched = grads
            .iter()
            .any(|(n, t)| n.starts_with("critic/") && t.max_abs() > 0.0);
        assert!(critic_touched);
    }

    #[test]
    fn every_sub_critic_passes_finite_difference() {
        let mut rng = Rng::seed_from(29);
        let mut ensemble = CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng).unwrap();
        randomize_params(&mut ensemble, &mut rng);
        let w = rand_wave(128, 31);
        let report = grad_check_with(
            &mut ensemble,
            &mut |m, f| m.visit_params_mut(f),
            &mut |m| {
                let g = Graph::new();
                let wn = g.constant(w.clone());
                let scores = m.score(&g, &wn).unwrap();
                let loss = Node::concat(&scores.all(), 0).square().mean();
                (g, loss)
            },
            5e-4,
        );
        assert!(
            report.max_rel_err < GRAD_TOL,
            "critic FD check failed: {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}
