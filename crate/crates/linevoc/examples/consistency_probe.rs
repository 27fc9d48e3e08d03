// Train briefly, then compare the training-style loss computation against
// the inference-style eval on identical inputs.
use linevoc::critic::CriticConfig;
use linevoc::denoiser::DenoiserConfig;
use linevoc::diffusion::{make_training_pair, TrainSchedule};
use linevoc::grad::{Graph, Tensor};
use linevoc::loss::diffusion_loss;
use linevoc::rng::Rng;
use linevoc::train::{synth_dataset, SynthDatasetSpec, TrainConfig, Trainer};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(120);
    let t_max: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(4);
    let spec = SynthDatasetSpec {
        n_clips: 4, clip_samples: 22_016, noise_burst_prob: 0.0, seed: 2301,
        f0_min: 150.0, f0_max: 350.0, max_harmonics: 6,
        ..Default::default()
    };
    let data = synth_dataset(&spec).unwrap();
    let dcfg = DenoiserConfig { hidden_dim: 64, n_layers: 2, t_train_max: t_max, ..Default::default() };
    let tcfg = TrainConfig {
        stage1_end: steps, stage2_end: steps, total_steps: steps,
        batch_size: 4, clip_samples_short: 22_016, clip_samples_long: 22_016,
        lr: std::env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(1e-3), seed: 2301, ..Default::default()
    };
    let mut trainer = Trainer::new(dcfg, CriticConfig::tiny(), tcfg).unwrap();
    let mut last = 0.0;
    for step in 1..=steps {
        let r = trainer.train_step(&data).unwrap();
        last = r.l_diff;
        if step % 40 == 0 { println!("train {step}: l_diff {:.5}", r.l_diff); }
    }
    println!("last train l_diff {last:.5}");

    let model = &trainer.denoiser;
    let sched = TrainSchedule { t_train_max: t_max };
    let mut rng = Rng::seed_from(909);
    // Bucketed eval via BOTH paths.
    let mut sums = vec![0.0f64; t_max];
    let mut sums_graph = vec![0.0f64; t_max];
    let mut counts = vec![0usize; t_max];
    for _ in 0..48 {
        let ci = rng.below(4) as usize;
        let x_data = Tensor::<f32>::new(&[22_016], data.clips[ci].samples().to_vec());
        let (x_t, t, _) = make_training_pair(&x_data, &mut rng, &sched);
        // Path A: inference-style predict.
        let pred = model.predict_tensor(&x_t, &data.mels[ci], t).unwrap();
        let mse: f64 = pred.data().iter().zip(x_data.data())
            .map(|(&p, &d)| ((p - d) as f64).powi(2)).sum::<f64>() / 22_016.0;
        // Path B: training-style graph loss.
        let g = Graph::<f32>::new();
        let xn = g.constant(x_t.clone());
        let y = model.forward_node(&g, &xn, &data.mels[ci], t).unwrap();
        let tgt = g.constant(x_data.clone());
        let loss = diffusion_loss(&y, &tgt).item() as f64;
        sums[t] += mse;
        sums_graph[t] += loss;
        counts[t] += 1;
    }
    for t in 0..t_max {
        if counts[t] > 0 {
            println!(
                "t={t}: n={}, predict-path mse {:.5}, graph-path l_diff {:.5}",
                counts[t],
                sums[t] / counts[t] as f64,
                sums_graph[t] / counts[t] as f64
            );
        }
    }

    // Per-clip generation error at embedding 0.
    for ci in 0..4 {
        let x_data = Tensor::<f32>::new(&[22_016], data.clips[ci].samples().to_vec());
        let mut acc = 0.0f64;
        for _ in 0..4 {
            let noise = Tensor::<f32>::randn(&[22_016], &mut rng);
            let pred = model.predict_tensor(&noise, &data.mels[ci], 0).unwrap();
            acc += pred.data().iter().zip(x_data.data())
                .map(|(&p, &d)| ((p - d) as f64).powi(2)).sum::<f64>() / 22_016.0 / 4.0;
        }
        println!("clip {ci} gen(t=0) mse {acc:.5}");
    }

    // Sampler trajectory with per-step prediction error.
    use linevoc::diffusion::{euler_step, step_embed_index, DiffusionState};
    let ci = 0usize;
    let x_data = Tensor::<f32>::new(&[22_016], data.clips[ci].samples().to_vec());
    let n = 100usize;
    let mut srng = Rng::substream(77, "sample/noise");
    let x0 = Tensor::<f32>::randn(&[22_016], &mut srng);
    let mut state = DiffusionState::from_noise(x0, n).unwrap();
    for k in 0..n {
        let idx = step_embed_index(k, n, &sched);
        let pred = model.predict_tensor(&state.x_t, &data.mels[ci], idx).unwrap();
        if k % 10 == 0 || k == n - 1 {
            let mse: f64 = pred.data().iter().zip(x_data.data())
                .map(|(&p, &d)| ((p - d) as f64).powi(2)).sum::<f64>() / 22_016.0;
            println!("sampler k={k} emb={idx}: pred mse {mse:.5}");
        }
        state = euler_step(&state, &pred).unwrap();
    }
    let final_mse: f64 = state.x_t.data().iter().zip(x_data.data())
        .map(|(&p, &d)| ((p - d) as f64).powi(2)).sum::<f64>() / 22_016.0;
    println!("sampler final mse {final_mse:.5}");
}
