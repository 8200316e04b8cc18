//! Deterministic reverse process.
//!
//! Sampling starts from pure noise and repeatedly predicts the clean
//! embedding, blending the conditional and unconditional denoiser branches
//! with a guidance weight, then re-noises to the previous step with the
//! closed-form update and zero stochasticity.

use crate::model::{denoise, Condition, ModelError, ParamVars};
use crate::numerics::{Tape, Tensor, TensorError, VarId};
use crate::rng;
use crate::schedule::{DiffusionSchedule, ScheduleError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampler steps {steps} must lie in 1..={t_max}")]
    InvalidStepCount { steps: usize, t_max: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Number of reverse steps; maps onto the schedule via `t = s * t_max / steps`.
    pub ddim_steps: usize,
    /// Guidance weight `w`; the blended prediction is
    /// `(1 + w) * conditional - w * unconditional`.
    pub guidance_weight: f64,
    /// Seed for the initial noise draw.
    pub seed: u64,
}

/// Descending step grid visited by the sampler.
pub fn step_grid(t_max: usize, steps: usize) -> Vec<usize> {
    (1..=steps).rev().map(|s| s * t_max / steps).collect()
}

/// Guidance-blended clean-embedding prediction at step `t`.
pub fn guided_x0(
    tape: &mut Tape,
    pv: &ParamVars,
    e_t: VarId,
    t: usize,
    cond: &Condition,
    w: f64,
) -> Result<VarId, ModelError> {
    let conditional = denoise(tape, pv, e_t, t, cond)?;
    let unconditional = denoise(tape, pv, e_t, t, &Condition::unconditional(pv.phi))?;
    let amplified = tape.scale(conditional, 1.0 + w)?;
    let counter = tape.scale(unconditional, w)?;
    Ok(tape.sub(amplified, counter)?)
}

/// Noise implied by a state `e_t` and a clean prediction:
/// `(e_t - sqrt(abar_t) * x0) / sqrt(1 - abar_t)`.
pub fn noise_estimate(
    schedule: &DiffusionSchedule,
    e_t: &Tensor,
    t: usize,
    x0_hat: &Tensor,
) -> Result<Tensor, SamplerError> {
    if t == 0 || t > schedule.t_max() {
        return Err(ScheduleError::StepOutOfRange {
            t,
            t_max: schedule.t_max(),
        }
        .into());
    }
    if e_t.shape() != x0_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "noise_estimate",
            left: e_t.shape().to_vec(),
            right: x0_hat.shape().to_vec(),
        }
        .into());
    }
    let ab = schedule.alpha_bar(t);
    let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = e_t
        .values()
        .iter()
        .zip(x0_hat.values())
        .map(|(&e, &x)| (e - cs * x) / cn)
        .collect();
    Ok(Tensor::new(e_t.shape().to_vec(), values)?)
}

/// One deterministic reverse step from `t` to `t - 1`: re-noises the clean
/// prediction with the implied noise at the previous signal level. At `t = 1`
/// the result is the prediction itself.
pub fn ddim_step(
    schedule: &DiffusionSchedule,
    e_t: &Tensor,
    t: usize,
    x0_hat: &Tensor,
) -> Result<Tensor, SamplerError> {
    let eps = noise_estimate(schedule, e_t, t, x0_hat)?;
    let ab_prev = schedule.alpha_bar(t - 1);
    let (cs, cn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let values = x0_hat
        .values()
        .iter()
        .zip(eps.values())
        .map(|(&x, &e)| cs * x + cn * e)
        .collect();
    Ok(Tensor::new(e_t.shape().to_vec(), values)?)
}

/// Full reverse pass driven by an arbitrary clean-embedding predictor.
/// Returns the final prediction.
pub fn sample_with<F>(
    mut predict_x0: F,
    schedule: &DiffusionSchedule,
    cfg: &SamplerConfig,
    dim: usize,
) -> Result<Tensor, SamplerError>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor, SamplerError>,
{
    if cfg.ddim_steps == 0 || cfg.ddim_steps > schedule.t_max() {
        return Err(SamplerError::InvalidStepCount {
            steps: cfg.ddim_steps,
            t_max: schedule.t_max(),
        });
    }
    let mut state = Tensor::randn(vec![dim], &mut rng::stream(cfg.seed, &[]));
    let mut prediction = None;
    for t in step_grid(schedule.t_max(), cfg.ddim_steps) {
        let x0 = predict_x0(&state, t)?;
        state = ddim_step(schedule, &state, t, &x0)?;
        prediction = Some(x0);
    }
    Ok(prediction.expect("at least one step"))
}

/// Reverse pass through the bound model with classifier-free guidance.
pub fn sample(
    tape: &mut Tape,
    pv: &ParamVars,
    schedule: &DiffusionSchedule,
    cond: &Condition,
    cfg: &SamplerConfig,
) -> Result<Tensor, SamplerError> {
    let dim = pv.dim;
    sample_with(
        |state, t| {
            let e_t = tape.constant(state.clone());
            let x0 = guided_x0(tape, pv, e_t, t, cond, cfg.guidance_weight)?;
            Ok(tape.value(x0).clone())
        },
        schedule,
        cfg,
        dim,
    )
}
