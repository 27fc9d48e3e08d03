// Diagnose sampling despite good training loss: per-fraction prediction
// error, sampler state stats, and final MCD.
use linevoc::critic::CriticConfig;
use linevoc::denoiser::DenoiserConfig;
use linevoc::diffusion::{euler_step, interpolate, DiffusionState, Predictor, TrainSchedule};
use linevoc::grad::Tensor;
use linevoc::metrics;
use linevoc::rng::Rng;
use linevoc::train::{synth_dataset, SynthDatasetSpec, TrainConfig, Trainer};
use linevoc::dsp::Waveform;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let spec = SynthDatasetSpec {
        n_clips: 4, clip_samples: 22_016, noise_burst_prob: 0.0, seed: 2301,
        ..Default::default()
    };
    let data = synth_dataset(&spec).unwrap();
    let t_max: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let dcfg = DenoiserConfig { hidden_dim: 64, n_layers: 2, t_train_max: t_max, ..Default::default() };
    let tcfg = TrainConfig {
        stage1_end: steps, stage2_end: steps, total_steps: steps,
        batch_size: 4, clip_samples_short: 22_016, clip_samples_long: 22_016,
        lr: 1e-3, seed: 2301, ..Default::default()
    };
    let mut trainer = Trainer::new(dcfg, CriticConfig::tiny(), tcfg).unwrap();
    for step in 1..=steps {
        let r = trainer.train_step(&data).unwrap();
        if step % 100 == 0 { println!("train {step}: l_diff {:.5}", r.l_diff); }
    }
    let model = &trainer.denoiser;
    let clip = 0usize;
    let x_data = Tensor::<f32>::new(&[22_016], data.clips[clip].samples().to_vec());
    let mel = &data.mels[clip];

    // Prediction error on true path states at fixed fractions.
    let mut rng = Rng::seed_from(4141);
    for &t in &[0usize, t_max / 10, t_max / 4, t_max / 2, (3 * t_max) / 4, (9 * t_max) / 10] {
        let t = t.min(t_max.saturating_sub(1));
        let noise = Tensor::<f32>::randn(&[22_016], &mut rng);
        let s = t as f64 / 1000.0;
        let x_t = interpolate(&x_data, &noise, s).unwrap();
        let pred = model.predict(&x_t, mel, t).unwrap();
        let mse: f64 = pred.data().iter().zip(x_data.data())
            .map(|(&p, &d)| ((p - d) as f64).powi(2)).sum::<f64>() / 22_016.0;
        let pmax = pred.max_abs();
        println!("on-path t={t}: pred mse {mse:.5}, pred max|.| {pmax:.3}");
    }

    // Sampler trajectory with state statistics.
    let n = 100usize;
    let mut srng = Rng::substream(77, "sample/noise");
    let x0 = Tensor::<f32>::randn(&[22_016], &mut srng);
    let mut state = DiffusionState::from_noise(x0, n).unwrap();
    let sched = TrainSchedule { t_train_max: t_max };
    for k in 0..n {
        let t_index = linevoc::diffusion::step_embed_index(k, n, &sched);
        let pred = model.predict(&state.x_t, mel, t_index).unwrap();
        if k % 10 == 0 || k == n - 1 {
            let pred_mse: f64 = pred.data().iter().zip(x_data.data())
                .map(|(&p, &d)| ((p - d) as f64).powi(2)).sum::<f64>() / 22_016.0;
            let state_rms: f64 = (state.x_t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 22_016.0).sqrt();
            println!("sample k={k} (t_index {t_index}): state rms {state_rms:.3}, pred-vs-data mse {pred_mse:.5}, pred max {:.3}", pred.max_abs());
        }
        state = euler_step(&state, &pred).unwrap();
    }
    let samples: Vec<f32> = state.x_t.data().iter().map(|&v| v.clamp(-1.0, 1.0)).collect();
    let out = Waveform::new(samples, 22050).unwrap();
    let mcd = metrics::mcd(&out, &data.clips[clip]).unwrap();
    let final_mse: f64 = state.x_t.data().iter().zip(x_data.data())
        .map(|(&p, &d)| ((p - d) as f64).powi(2)).sum::<f64>() / 22_016.0;
    println!("final: mse {final_mse:.5}, MCD {mcd:.2} dB");
}
