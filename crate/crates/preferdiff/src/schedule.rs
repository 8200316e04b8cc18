//! Variance schedule for the forward noising process.
//!
//! Steps are 1-based: `beta(t)` for `t in 1..=t_max`, with `alpha_bar(0) == 1`
//! reserved for the noiseless state. Internally the arrays are 0-indexed.

use crate::numerics::{Tape, Tensor, TensorError, VarId};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least one step")]
    EmptySchedule,
    #[error("beta range [{start}, {end}] must satisfy 0 < start <= end < 1")]
    InvalidBetaRange { start: f64, end: f64 },
    #[error("diffusion step {t} outside 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear interpolation of beta from `beta_start` at t=1 to `beta_end` at
    /// t=t_max. A single-step schedule uses `beta_start` alone.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        if t_max == 0 {
            return Err(ScheduleError::EmptySchedule);
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::InvalidBetaRange {
                start: beta_start,
                end: beta_end,
            });
        }
        let betas: Vec<f64> = if t_max == 1 {
            vec![beta_start]
        } else {
            (0..t_max)
                .map(|i| beta_start + i as f64 * (beta_end - beta_start) / (t_max - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.t_max() {
            Err(ScheduleError::StepOutOfRange {
                t,
                t_max: self.t_max(),
            })
        } else {
            Ok(())
        }
    }

    /// `t` in `1..=t_max`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `t` in `1..=t_max`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas; `t` in `0..=t_max` with `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Closed-form forward noising: `sqrt(abar_t) * e0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_noise(
        &self,
        e0: &Tensor,
        t: usize,
        eps: &Tensor,
    ) -> Result<Tensor, ScheduleError> {
        self.check_step(t)?;
        if e0.shape() != eps.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "forward_noise",
                left: e0.shape().to_vec(),
                right: eps.shape().to_vec(),
            }
            .into());
        }
        let ab = self.alpha_bar(t);
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let values = e0
            .values()
            .iter()
            .zip(eps.values())
            .map(|(&s, &n)| cs * s + cn * n)
            .collect();
        Ok(Tensor::new(e0.shape().to_vec(), values)?)
    }

    /// Tape counterpart of [`Self::forward_noise`]; gradients flow into `e0`
    /// (and `eps`, when it is a differentiable leaf).
    pub fn forward_noise_var(
        &self,
        tape: &mut Tape,
        e0: VarId,
        t: usize,
        eps: VarId,
    ) -> Result<VarId, ScheduleError> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let signal = tape.scale(e0, ab.sqrt())?;
        let noise = tape.scale(eps, (1.0 - ab).sqrt())?;
        Ok(tape.add(signal, noise)?)
    }

    /// Rows `(t, beta, alpha, alpha_bar)` for diagnostics output.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (1..=self.t_max()).map(|t| (t, self.beta(t), self.alpha(t), self.alpha_bar(t)))
    }
}
