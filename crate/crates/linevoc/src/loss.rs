//! Training losses: waveform MSE, randomized multi-configuration spectral
//! reconstruction, and the least-squares adversarial pair.

use crate::dsp::{DftBasis, SpectrogramConfig};
use crate::grad::{Graph, Node, Scalar, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Adversarial-loss weight applied to the generator in stage three.
pub const STAGE3_ADV_WEIGHT: f64 = 0.2;

/// Training stages: reconstruction only, full adversarial, then long-clip
/// adversarial with the damped generator term and sparse critic updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Three,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Stage> {
        match i {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::Config(format!("unknown stage {i}"))),
        }
    }
}

/// Four analysis configurations; each spectral-loss evaluation draws one
/// uniformly to discourage overfitting to a single resolution.
pub struct StftBank<S: Scalar> {
    configs: [SpectrogramConfig; 4],
    bases: Vec<GraphBasis<S>>,
}

struct GraphBasis<S: Scalar> {
    window: Tensor<S>,
    cos: Tensor<S>,
    sin: Tensor<S>,
}

impl<S: Scalar> StftBank<S> {
    /// The default resolution ladder (win, hop, n_fft):
    /// (256,64,256), (512,128,512), (1024,256,1024), (2048,512,2048).
    pub fn default_bank() -> Result<Self> {
        StftBank::new([
            SpectrogramConfig::new(256, 256, 64)?,
            SpectrogramConfig::new(512, 512, 128)?,
            SpectrogramConfig::new(1024, 1024, 256)?,
            SpectrogramConfig::new(2048, 2048, 512)?,
        ])
    }

    /// A reduced ladder for short test signals.
    pub fn tiny_bank() -> Result<Self> {
        StftBank::new([
            SpectrogramConfig::new(32, 32, 8)?,
            SpectrogramConfig::new(64, 64, 16)?,
            SpectrogramConfig::new(128, 128, 32)?,
            SpectrogramConfig::new(256, 256, 64)?,
        ])
    }

    pub fn new(configs: [SpectrogramConfig; 4]) -> Result<Self> {
        let mut bases = Vec::with_capacity(4);
        for cfg in &configs {
            let b = DftBasis::build(*cfg)?;
            let bins = cfg.bins();
            bases.push(GraphBasis {
                window: Tensor::from_f64_slice(&[cfg.n_fft], &b.window),
                cos: Tensor::from_f64_slice(&[cfg.n_fft, bins], &b.cos),
                sin: Tensor::from_f64_slice(&[cfg.n_fft, bins], &b.sin),
            });
        }
        Ok(StftBank { configs, bases })
    }

    pub fn configs(&self) -> &[SpectrogramConfig; 4] {
        &self.configs
    }

    /// Differentiable magnitude spectrogram under configuration `idx`.
    pub fn magnitude_node(&self, g: &Graph<S>, w: &Node<S>, idx: usize) -> Result<Node<S>> {
        let cfg = &self.configs[idx];
        if w.numel() < cfg.n_fft {
            return Err(Error::Shape(format!(
                "waveform of {} samples shorter than window {}",
                w.numel(),
                cfg.n_fft
            )));
        }
        let basis = &self.bases[idx];
        let frames = w.frame1d(cfg.n_fft, cfg.hop_length);
        let windowed = frames.mul(&g.constant(basis.window.clone()));
        let re = windowed.matmul(&g.constant(basis.cos.clone()));
        let im = windowed.matmul(&g.constant(basis.sin.clone()));
        Ok(re.square().add(&im.square()).sqrt())
    }
}

/// Mean squared error between prediction and target waveforms.
pub fn diffusion_loss<S: Scalar>(x_hat: &Node<S>, x_data: &Node<S>) -> Node<S> {
    assert_eq!(
        x_hat.shape(),
        x_data.shape(),
        "diffusion loss shapes differ"
    );
    x_hat.sub(x_data).square().mean()
}

/// Magnitude-spectrogram MSE under one bank configuration drawn uniformly
/// from `rng`. Returns the loss node and the chosen configuration index.
pub fn stft_loss<S: Scalar>(
    g: &Graph<S>,
    x_hat: &Node<S>,
    x_data: &Node<S>,
    bank: &StftBank<S>,
    rng: &mut Rng,
) -> Result<(Node<S>, usize)> {
    let idx = rng.below(4) as usize;
    let loss = stft_loss_with(g, x_hat, x_data, bank, idx)?;
    Ok((loss, idx))
}

/// Magnitude-spectrogram MSE under a fixed bank configuration, normalized
/// by the mean squared magnitude of the two spectra. Raw magnitudes grow
/// with the transform size, which makes the four configurations differ by
/// orders of magnitude and lets this term starve the waveform loss; the
/// normalization keeps every configuration at unit scale while preserving
/// symmetry and the zero-iff-identical property. The normalizer is part of
/// the differentiated expression (reciprocal via exp(-ln)).
pub fn stft_loss_with<S: Scalar>(
    g: &Graph<S>,
    x_hat: &Node<S>,
    x_data: &Node<S>,
    bank: &StftBank<S>,
    idx: usize,
) -> Result<Node<S>> {
    let mag_hat = bank.magnitude_node(g, x_hat, idx)?;
    let mag_data = bank.magnitude_node(g, x_data, idx)?;
    let diff = mag_hat.sub(&mag_data).square().mean();
    let scale = mag_hat
        .square()
        .mean()
        .add(&mag_data.square().mean())
        .scale(0.5)
        .add_scalar(1e-6);
    let inv_scale = scale.log().neg().exp();
    Ok(diff.mul(&inv_scale))
}

/// Generator side of the least-squares pair: mean over sub-critics of
/// `(1 - score)^2`.
pub fn adv_loss_generator<S: Scalar>(scores_fake: &[Node<S>]) -> Node<S> {
    assert!(!scores_fake.is_empty(), "no critic scores");
    let stacked = Node::concat(scores_fake, 0);
    stacked.neg().add_scalar(1.0).square().mean()
}

/// Critic side: mean over sub-critics of `fake^2 + (1 - real)^2`. The fake
/// scores must come from a detached waveform so no gradient reaches the
/// generator.
pub fn adv_loss_discriminator<S: Scalar>(
    scores_fake_detached: &[Node<S>],
    scores_real: &[Node<S>],
) -> Node<S> {
    assert_eq!(
        scores_fake_detached.len(),
        scores_real.len(),
        "critic score counts differ"
    );
    assert!(!scores_real.is_empty(), "no critic scores");
    let fake = Node::concat(scores_fake_detached, 0).square();
    let real = Node::concat(scores_real, 0).neg().add_scalar(1.0).square();
    fake.add(&real).mean()
}

/// Stage-weighted generator objective: stage 1 drops the adversarial term,
/// stage 2 sums all three, stage 3 damps the adversarial term by 0.2.
pub fn total_generator_loss<S: Scalar>(
    l_adv_g: Option<&Node<S>>,
    l_s: &Node<S>,
    l_diff: &Node<S>,
    stage: Stage,
) -> Result<Node<S>> {
    match stage {
        Stage::One => Ok(l_diff.add(l_s)),
        Stage::Two => {
            let adv = l_adv_g.ok_or_else(|| {
                Error::Train("stage 2 requires an adversarial generator loss".into())
            })?;
            Ok(adv.add(l_s).add(l_diff))
        }
        Stage::Three => {
            let adv = l_adv_g.ok_or_else(|| {
                Error::Train("stage 3 requires an adversarial generator loss".into())
            })?;
            Ok(adv.scale(STAGE3_ADV_WEIGHT).add(l_s).add(l_diff))
        }
    }
}

/// Per-step loss values for the training log. `l_adv_g` and `l_adv_d` are
/// zero on steps where the corresponding term was not evaluated (stage 1,
/// or critic-idle steps in stage 3).
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub stage: Stage,
    pub l_diff: f64,
    pub l_s: f64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_gen: f64,
    pub stft_cfg_index: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,stage,l_diff,l_s,l_adv_g,l_adv_d,l_gen,stft_cfg_index";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.index(),
            self.l_diff,
            self.l_s,
            self.l_adv_g,
            self.l_adv_d,
            self.l_gen,
            self.stft_cfg_index
        )
    }

    pub fn all_finite(&self) -> bool {
        self.l_diff.is_finite()
            && self.l_s.is_finite()
            && self.l_adv_g.is_finite()
            && self.l_adv_d.is_finite()
            && self.l_gen.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check::{grad_check, GRAD_TOL};
    use crate::grad::Param;

    fn scalars(g: &Graph<f64>, vals: &[f64]) -> Vec<Node<f64>> {
        vals.iter().map(|&v| g.constant(Tensor::scalar(v))).collect()
    }

    #[test]
    fn diffusion_loss_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64_slice(&[4], &[0.3, -0.1, 0.9, 0.0]));
        assert_eq!(diffusion_loss(&a, &a).item(), 0.0);
        let b = a.add_scalar(1.0);
        assert!((diffusion_loss(&b, &a).item() - 1.0).abs() < 1e-12);
        let x = g.constant(Tensor::scalar(0.5));
        let y = g.constant(Tensor::scalar(-0.5));
        assert!((diffusion_loss(&x, &y).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diffusion_loss_is_symmetric() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::seed_from(3);
        let a = g.constant(Tensor::from_fn(&[64], |_| rng.uniform(-1.0, 1.0)));
        let b = g.constant(Tensor::from_fn(&[64], |_| rng.uniform(-1.0, 1.0)));
        assert_eq!(
            diffusion_loss(&a, &b).item(),
            diffusion_loss(&b, &a).item()
        );
    }

    #[test]
    fn stft_loss_is_zero_for_identical_waveforms_under_every_config() {
        let bank = StftBank::<f64>::tiny_bank().unwrap();
        let g = Graph::new();
        let mut rng = Rng::seed_from(5);
        let w = g.constant(Tensor::from_fn(&[512], |_| rng.uniform(-0.9, 0.9)));
        for idx in 0..4 {
            let loss = stft_loss_with(&g, &w, &w, &bank, idx).unwrap();
            assert_eq!(loss.item(), 0.0, "config {idx}");
        }
    }

    #[test]
    fn stft_loss_is_symmetric_and_nonnegative() {
        let bank = StftBank::<f64>::tiny_bank().unwrap();
        let g = Graph::new();
        let mut rng = Rng::seed_from(6);
        let a = g.constant(Tensor::from_fn(&[512], |_| rng.uniform(-0.9, 0.9)));
        let b = g.constant(Tensor::from_fn(&[512], |_| rng.uniform(-0.9, 0.9)));
        for idx in 0..4 {
            let ab = stft_loss_with(&g, &a, &b, &bank, idx).unwrap().item();
            let ba = stft_loss_with(&g, &b, &a, &bank, idx).unwrap().item();
            assert!(ab > 0.0);
            assert_eq!(ab, ba);
        }
    }

    #[test]
    fn stft_loss_config_choice_is_uniform() {
        let bank = StftBank::<f64>::tiny_bank().unwrap();
        let mut rng = Rng::seed_from(31415);
        let g = Graph::new();
        let w = g.constant(Tensor::from_fn(&[256], |i| (i as f64 * 0.05).sin() * 0.5));
        let draws = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let (_, idx) = stft_loss(&g, &w, &w, &bank, &mut rng).unwrap();
            counts[idx] += 1;
        }
        let expect = draws as f64 / 4.0;
        let sigma = (expect * 0.75).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 5.0 * sigma,
                "config {i}: {c} draws vs expected {expect}"
            );
        }
    }

    #[test]
    fn stft_loss_rejects_short_waveforms() {
        let bank = StftBank::<f64>::default_bank().unwrap();
        let g = Graph::new();
        let w = g.constant(Tensor::zeros(&[128]));
        assert!(stft_loss_with(&g, &w, &w, &bank, 3).is_err());
    }

    #[test]
    fn stft_loss_gradient_matches_finite_differences() {
        let bank = StftBank::<f64>::tiny_bank().unwrap();
        let mut rng = Rng::seed_from(8);
        let target = Tensor::from_fn(&[512], |_| rng.uniform(-0.9, 0.9));
        let mut params = vec![Param::new(
            "x",
            Tensor::from_fn(&[512], |_| rng.uniform(-0.9, 0.9)),
        )];
        let report = grad_check(
            &mut params,
            &|g, nodes| {
                let tgt = g.constant(target.clone());
                stft_loss_with(g, &nodes[0], &tgt, &bank, 1).unwrap()
            },
            1e-5,
        );
        assert!(
            report.max_rel_err < GRAD_TOL,
            "stft loss FD: {}",
            report.max_rel_err
        );
    }

    #[test]
    fn generator_adversarial_examples() {
        let g = Graph::<f64>::new();
        let ones = scalars(&g, &[1.0; 5]);
        assert_eq!(adv_loss_generator(&ones).item(), 0.0);
        let zeros = scalars(&g, &[0.0; 5]);
        assert_eq!(adv_loss_generator(&zeros).item(), 1.0);
        let mixed = scalars(&g, &[1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((adv_loss_generator(&mixed).item() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn discriminator_adversarial_examples() {
        let g = Graph::<f64>::new();
        let perfect = adv_loss_discriminator(&scalars(&g, &[0.0; 5]), &scalars(&g, &[1.0; 5]));
        assert_eq!(perfect.item(), 0.0);
        let fooled = adv_loss_discriminator(&scalars(&g, &[1.0; 5]), &scalars(&g, &[0.0; 5]));
        assert_eq!(fooled.item(), 2.0);
    }

    #[test]
    fn discriminator_loss_never_reaches_generator_params() {
        let g = Graph::<f64>::new();
        let gen = Param::new("gen/w", Tensor::from_f64_slice(&[3], &[0.4, -0.2, 0.9]));
        let gn = g.param(&gen);
        let fake_wave = gn.scale(1.1);
        // Stand-in critic: mean of the waveform as the score.
        let fake_score = fake_wave.detach().mean();
        let real_score = g.constant(Tensor::scalar(0.8)).mean();
        let loss = adv_loss_discriminator(&[fake_score], &[real_score]);
        g.backward(&loss);
        let grads = g.param_grads();
        assert_eq!(grads[0].1.max_abs(), 0.0);
    }

    #[test]
    fn stage_weighting_examples() {
        let g = Graph::<f64>::new();
        let adv = g.constant(Tensor::scalar(1.0));
        let ls = g.constant(Tensor::scalar(0.3));
        let ld = g.constant(Tensor::scalar(0.2));

        let s3 = total_generator_loss(Some(&adv), &ls, &ld, Stage::Three).unwrap();
        assert!((s3.item() - 0.7).abs() < 1e-12);
        let s2 = total_generator_loss(Some(&adv), &ls, &ld, Stage::Two).unwrap();
        assert!((s2.item() - 1.5).abs() < 1e-12);

        // Stage 1 ignores the adversarial term entirely.
        let huge = g.constant(Tensor::scalar(5.0));
        let s1 = total_generator_loss(Some(&huge), &ls, &ld, Stage::One).unwrap();
        assert!((s1.item() - 0.5).abs() < 1e-12);
        let s1b = total_generator_loss(None, &ls, &ld, Stage::One).unwrap();
        assert_eq!(s1.item(), s1b.item());

        // Stages 2 and 3 require the adversarial node.
        assert!(total_generator_loss(None, &ls, &ld, Stage::Two).is_err());
        assert!(total_generator_loss(None, &ls, &ld, Stage::Three).is_err());
    }

    #[test]
    fn report_csv_roundtrip_shape() {
        let r = LossReport {
            step: 7,
            stage: Stage::Three,
            l_diff: 0.125,
            l_s: 2.5,
            l_adv_g: 0.0,
            l_adv_d: 0.5,
            l_gen: 2.625,
            stft_cfg_index: 2,
        };
        assert!(r.all_finite());
        let row = r.to_csv_row();
        assert_eq!(row.split(',').count(), LossReport::CSV_HEADER.split(',').count());
        assert!(row.starts_with("7,3,"));
    }
}
