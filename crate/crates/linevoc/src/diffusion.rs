//! The straight-line noise-to-data path: training-pair construction, the
//! implicit velocity, and the N-step Euler sampler.
//!
//! Conventions: `x_data` is the clean waveform, `x_noise` the initial
//! standard-Gaussian draw, `t` counts reverse steps `0..=N`, and the fraction
//! `s = t / N` places the state on the segment
//! `x_t = (1 - s) * x_noise + s * x_data`.

use crate::dsp::{MelCondition, Waveform, HOP};
use crate::grad::{Scalar, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Number of discrete step indices the denoiser was trained with; inference
/// step counts are mapped onto this range by [`step_embed_index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSchedule {
    pub t_train_max: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule { t_train_max: 1000 }
    }
}

impl TrainSchedule {
    pub fn new(t_train_max: usize) -> Result<Self> {
        if t_train_max == 0 {
            return Err(Error::Config("t_train_max must be >= 1".into()));
        }
        Ok(TrainSchedule { t_train_max })
    }
}

/// Sampler state: the current point on the path, the step index, and the
/// stored initial noise the velocity is measured against.
#[derive(Debug, Clone)]
pub struct DiffusionState<S: Scalar> {
    pub x_t: Tensor<S>,
    pub t: usize,
    pub x_noise: Tensor<S>,
    pub n_steps: usize,
}

impl<S: Scalar> DiffusionState<S> {
    /// Start a reverse pass at the noise end of the path.
    pub fn from_noise(x_noise: Tensor<S>, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("n_steps must be >= 1".into()));
        }
        Ok(DiffusionState {
            x_t: x_noise.clone(),
            t: 0,
            x_noise,
            n_steps,
        })
    }
}

/// Pointwise `(1 - s) * x_noise + s * x_data`.
pub fn interpolate<S: Scalar>(
    x_data: &Tensor<S>,
    x_noise: &Tensor<S>,
    s: f64,
) -> Result<Tensor<S>> {
    if x_data.shape() != x_noise.shape() {
        return Err(Error::Shape(format!(
            "interpolate shapes differ: {:?} vs {:?}",
            x_data.shape(),
            x_noise.shape()
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Config(format!(
            "interpolation fraction {s} not in [0, 1]"
        )));
    }
    let sv = S::from_f64(s);
    let cv = S::from_f64(1.0 - s);
    let mut out = x_noise.clone();
    for (o, &d) in out.data_mut().iter_mut().zip(x_data.data()) {
        *o = *o * cv + d * sv;
    }
    Ok(out)
}

/// Update direction of the implicit parameterization: the predicted clean
/// signal minus the stored initial noise. Constant along the path for a
/// perfect predictor.
pub fn velocity<S: Scalar>(x_hat_data: &Tensor<S>, x_noise: &Tensor<S>) -> Result<Tensor<S>> {
    if x_hat_data.shape() != x_noise.shape() {
        return Err(Error::Shape(format!(
            "velocity shapes differ: {:?} vs {:?}",
            x_hat_data.shape(),
            x_noise.shape()
        )));
    }
    let mut out = x_hat_data.clone();
    for (o, &n) in out.data_mut().iter_mut().zip(x_noise.data()) {
        *o = *o - n;
    }
    Ok(out)
}

/// One explicit Euler step: `x_{t+1} = x_t + (x_hat - x_noise) / N`, with the
/// stored noise carried unchanged.
pub fn euler_step<S: Scalar>(
    state: &DiffusionState<S>,
    x_hat_data: &Tensor<S>,
) -> Result<DiffusionState<S>> {
    if state.t >= state.n_steps {
        return Err(Error::Config(format!(
            "euler_step past the end: t = {} of {}",
            state.t, state.n_steps
        )));
    }
    let v = velocity(x_hat_data, &state.x_noise)?;
    if v.shape() != state.x_t.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} does not match state {:?}",
            x_hat_data.shape(),
            state.x_t.shape()
        )));
    }
    let inv_n = S::from_f64(1.0 / state.n_steps as f64);
    let mut x_next = state.x_t.clone();
    for (o, &dv) in x_next.data_mut().iter_mut().zip(v.data()) {
        *o += dv * inv_n;
    }
    Ok(DiffusionState {
        x_t: x_next,
        t: state.t + 1,
        x_noise: state.x_noise.clone(),
        n_steps: state.n_steps,
    })
}

/// Map an inference step index onto the training step range:
/// `round(t / N * t_train_max)`.
pub fn step_embed_index(t_inference: usize, n_steps: usize, schedule: &TrainSchedule) -> usize {
    debug_assert!(t_inference < n_steps);
    ((t_inference as f64 / n_steps as f64) * schedule.t_train_max as f64).round() as usize
}

/// The denoising predictor interface the sampler drives. Implemented by the
/// trained model and by test doubles.
pub trait Predictor<S: Scalar> {
    /// Predict the clean waveform from the current state, the conditioning
    /// sequence, and a training-range step index.
    fn predict(&self, x_t: &Tensor<S>, cond: &MelCondition, t_index: usize) -> Result<Tensor<S>>;

    /// The step range the predictor was trained against.
    fn schedule(&self) -> TrainSchedule;
}

/// Run the N-step reverse pass from seeded Gaussian noise of length
/// `256 * num_frames(cond)`, clipping the result to [-1, 1].
///
/// The sampler reads only the predictor's outputs and the stored noise;
/// fixing `(seed, weights, n_steps)` fixes the output bit-exactly.
pub fn sample<S: Scalar>(
    predictor: &dyn Predictor<S>,
    cond: &MelCondition,
    n_steps: usize,
    seed: u64,
) -> Result<Waveform> {
    let len = cond.num_frames() * HOP;
    let mut rng = Rng::substream(seed, "sample/noise");
    let x_noise = Tensor::<S>::randn(&[len], &mut rng);
    let mut state = DiffusionState::from_noise(x_noise, n_steps)?;
    let schedule = predictor.schedule();
    for t in 0..n_steps {
        let t_index = step_embed_index(t, n_steps, &schedule);
        let x_hat = predictor.predict(&state.x_t, cond, t_index)?;
        state = euler_step(&state, &x_hat)?;
    }
    let samples: Vec<f32> = state
        .x_t
        .data()
        .iter()
        .map(|&v| (v.to_f64().clamp(-1.0, 1.0)) as f32)
        .collect();
    Waveform::new(samples, cond.sample_rate())
}

/// Training-pair draw: a uniform step `t in [0, T_train)`, fresh Gaussian
/// noise, and the interpolated state at `s = t / T_train`.
pub fn make_training_pair<S: Scalar>(
    x_data: &Tensor<S>,
    rng: &mut Rng,
    schedule: &TrainSchedule,
) -> (Tensor<S>, usize, Tensor<S>) {
    let t = rng.below(schedule.t_train_max as u64) as usize;
    let x_noise = Tensor::<S>::randn(x_data.shape(), rng);
    let s = t as f64 / schedule.t_train_max as f64;
    let x_t = interpolate(x_data, &x_noise, s).expect("shapes match by construction");
    (x_t, t, x_noise)
}
