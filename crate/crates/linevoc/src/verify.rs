//! Runtime gradient verification: every op, every architectural block, and
//! the composite losses checked against central finite differences at 64-bit
//! precision. Backs the `gradcheck` command.

use crate::critic::{CriticConfig, CriticEnsemble};
use crate::denoiser::{randomize_params, Denoiser, DenoiserConfig};
use crate::dsp::{MelCondition, HOP, N_MELS, SAMPLE_RATE};
use crate::grad::check::{builtin_op_checks, grad_check_multi_h, CheckReport, GRAD_TOL};
use crate::grad::{Graph, Node, Param, Parameterized, Tensor};
use crate::loss::{
    adv_loss_generator, diffusion_loss, stft_loss_with, total_generator_loss, Stage, StftBank,
};
use crate::rng::Rng;
use crate::Result;

/// One verification row.
#[derive(Debug, Clone)]
pub struct NamedCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }

    fn from_report(name: &str, r: CheckReport) -> Self {
        NamedCheck {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            worst_param: r.worst_param,
        }
    }
}

/// Finite-difference step for deep composites: large enough to stay above
/// the f64 forward-accumulation noise floor, small enough that truncation
/// error remains orders below the pass threshold.
const COMPOSITE_H: f64 = 5e-4;

fn moderate_mel(frames: usize, seed: u64) -> MelCondition {
    let mut rng = Rng::seed_from(seed);
    MelCondition::from_rows(
        (0..frames * N_MELS)
            .map(|_| rng.uniform(-2.0, 1.0) as f32)
            .collect(),
        frames,
        SAMPLE_RATE,
    )
    .expect("valid mel")
}

fn tiny_denoiser_config(hidden: usize) -> DenoiserConfig {
    DenoiserConfig {
        patch_size: 64,
        hidden_dim: hidden,
        n_layers: 1,
        n_heads: 2,
        step_pe_dim: 16,
        postconv_channels: 2,
        lvc_kernel: 3,
        lvc_layers: 1,
        max_tokens: 64,
        t_train_max: 100,
    }
}

/// Denoiser plus critics treated as one parameter set, so composite losses
/// can be differentiated against everything they touch.
struct GenCriticPair {
    denoiser: Denoiser<f64>,
    critics: CriticEnsemble<f64>,
}

impl Parameterized<f64> for GenCriticPair {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
        self.denoiser.visit_params(f);
        self.critics.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.denoiser.visit_params_mut(f);
        self.critics.visit_params_mut(f);
    }
}

/// Architectural blocks and composite losses. `hidden` is clamped to 16.
pub fn block_checks(hidden: usize) -> Result<Vec<NamedCheck>> {
    let hidden = hidden.clamp(4, 16) & !1; // even, small
    let mut out = Vec::new();
    let mut rng = Rng::seed_from(0xb10c);

    // Step-adaptive layer norm, attention, and the token MLP are checked
    // through a one-block denoiser sliced by loss construction; the full
    // model check then covers their composition with the post stack.
    {
        let mut model = Denoiser::<f64>::new(tiny_denoiser_config(hidden), &mut rng)?;
        randomize_params(&mut model, &mut rng);
        let mel = moderate_mel(2, 0xaa);
        let mut probe = Rng::seed_from(0xab);
        let x_t = Tensor::from_fn(&[2 * HOP], |_| probe.uniform(-0.8, 0.8));
        let target = Tensor::from_fn(&[2 * HOP], |_| probe.uniform(-0.8, 0.8));
        let report = grad_check_multi_h(
            &mut model,
            &mut |m, f| m.visit_params_mut(f),
            &mut |m| {
                let g = Graph::new();
                let x = g.constant(x_t.clone());
                let y = m.forward_node(&g, &x, &mel, 7).expect("forward");
                let tgt = g.constant(target.clone());
                let loss = y.sub(&tgt).square().mean();
                (g, loss)
            },
            &[3e-5, COMPOSITE_H],
        );
        out.push(NamedCheck::from_report("denoiser_full", report));
    }
    out.extend(denoiser_sublayer_checks(hidden)?);

    // Critics, individually.
    {
        let names = ["spectral_critic", "multi_scale_critic", "multi_period_critic"];
        for (i, name) in names.iter().enumerate() {
            let mut ensemble = CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng)?;
            randomize_params(&mut ensemble, &mut rng);
            let mut probe = Rng::seed_from(0xc0 + i as u64);
            let w = Tensor::from_fn(&[128], |_| probe.uniform(-0.8, 0.8));
            let report = grad_check_multi_h(
                &mut ensemble,
                &mut |m, f| m.visit_params_mut(f),
                &mut |m| {
                    let g = Graph::new();
                    let wn = g.constant(w.clone());
                    let scores = m.score(&g, &wn).expect("score");
                    let picked = match i {
                        0 => vec![scores.spectral.clone()],
                        1 => scores.msd.clone(),
                        _ => scores.mpd.clone(),
                    };
                    let loss = Node::concat(&picked, 0).square().mean();
                    (g, loss)
                },
                &[3e-5, COMPOSITE_H],
            );
            out.push(NamedCheck::from_report(name, report));
        }
    }

    // Composite spectral loss w.r.t. the waveform.
    {
        let bank = StftBank::<f64>::tiny_bank()?;
        let mut probe = Rng::seed_from(0xd0);
        let target = Tensor::from_fn(&[512], |_| probe.uniform(-0.9, 0.9));
        let mut params = vec![Param::new(
            "wave",
            Tensor::from_fn(&[512], |_| probe.uniform(-0.9, 0.9)),
        )];
        let report = crate::grad::check::grad_check(
            &mut params,
            &|g, nodes| {
                let tgt = g.constant(target.clone());
                stft_loss_with(g, &nodes[0], &tgt, &bank, 1).expect("stft loss")
            },
            crate::grad::check::DEFAULT_H,
        );
        out.push(NamedCheck::from_report("stft_loss", report));
    }

    // Full stage-3 generator objective through denoiser and critics.
    {
        let mut pair = GenCriticPair {
            denoiser: Denoiser::<f64>::new(tiny_denoiser_config(hidden), &mut rng)?,
            critics: CriticEnsemble::<f64>::new(CriticConfig::tiny(), &mut rng)?,
        };
        randomize_params(&mut pair, &mut rng);
        let mel = moderate_mel(2, 0xee);
        let mut probe = Rng::seed_from(0xef);
        let x_t = Tensor::from_fn(&[2 * HOP], |_| probe.uniform(-0.8, 0.8));
        // Probe at a moderate reconstruction error: close enough to the
        // model's own output that the spectral term cannot drown the
        // adversarial gradients in difference-quotient cancellation, far
        // enough that reconstruction gradients stay well above noise.
        let center = pair.denoiser.predict_tensor(&x_t, &mel, 7)?;
        let target = Tensor::from_fn(&[2 * HOP], |i| {
            center.data()[i] + probe.uniform(-0.3, 0.3)
        });
        let bank = StftBank::<f64>::tiny_bank()?;
        let report = grad_check_multi_h(
            &mut pair,
            &mut |m, f| m.visit_params_mut(f),
            &mut |m| {
                let g = Graph::new();
                let x = g.constant(x_t.clone());
                let x_hat = m.denoiser.forward_node(&g, &x, &mel, 7).expect("forward");
                let tgt = g.constant(target.clone());
                let l_diff = diffusion_loss(&x_hat, &tgt);
                let l_s = stft_loss_with(&g, &x_hat, &tgt, &bank, 0).expect("stft");
                let scores = m.critics.score(&g, &x_hat).expect("critics");
                let l_adv = adv_loss_generator(&scores.all());
                let loss = total_generator_loss(Some(&l_adv), &l_s, &l_diff, Stage::Two)
                    .expect("stage loss");
                (g, loss)
            },
            &[3e-5, COMPOSITE_H],
        );
        out.push(NamedCheck::from_report("generator_loss_composite", report));
    }
    Ok(out)
}

/// Individual denoiser sub-layers checked in isolation.
fn denoiser_sublayer_checks(hidden: usize) -> Result<Vec<NamedCheck>> {
    use crate::denoiser::test_surface;
    test_surface::sublayer_checks(hidden, COMPOSITE_H)
}

/// The whole verification battery: ops first, then blocks and losses.
pub fn full_suite(hidden: usize) -> Result<Vec<NamedCheck>> {
    let mut out: Vec<NamedCheck> = builtin_op_checks()
        .into_iter()
        .map(|c| NamedCheck {
            name: format!("op/{}", c.name),
            max_rel_err: c.report.max_rel_err,
            worst_param: c.report.worst_param,
        })
        .collect();
    out.extend(block_checks(hidden)?);
    Ok(out)
}

/// A deliberately corrupted analytic rule; must fail, proving the harness
/// would catch a broken backward implementation.
pub fn injected_fault_check() -> NamedCheck {
    NamedCheck::from_report(
        "injected_fault",
        crate::grad::check::corrupted_rule_check(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_full_suite_passes() {
        for check in full_suite(8).unwrap() {
            assert!(
                check.passed(),
                "{} failed: rel err {} at {}",
                check.name,
                check.max_rel_err,
                check.worst_param
            );
        }
    }

    #[test]
    fn the_injected_fault_fails() {
        assert!(!injected_fault_check().passed());
    }
}
