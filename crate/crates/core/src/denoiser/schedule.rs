use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::DenoiserError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// `alpha = cos(pi t / 2T)`, `sigma = sin(pi t / 2T)`; the model predicts velocity.
    Diffusion,
    /// `alpha = 1 - t/T`, `sigma = t/T`; the model predicts `eps - x`.
    Flow,
}

impl std::str::FromStr for ScheduleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "flow" => Ok(Self::Flow),
            other => Err(format!(
                "unknown schedule mode `{other}` (expected diffusion or flow)"
            )),
        }
    }
}

/// Noise schedule over continuous time `t` in `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub mode: ScheduleMode,
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn new(mode: ScheduleMode, steps: usize) -> Result<Self, DenoiserError> {
        if steps == 0 {
            return Err(DenoiserError::Config(
                "schedule needs at least one step".into(),
            ));
        }
        Ok(Self { mode, steps })
    }

    pub fn flow(steps: usize) -> Self {
        Self {
            mode: ScheduleMode::Flow,
            steps,
        }
    }

    pub fn diffusion(steps: usize) -> Self {
        Self {
            mode: ScheduleMode::Diffusion,
            steps,
        }
    }

    fn check(&self, t: f64) -> Result<f64, DenoiserError> {
        let max = self.steps as f64;
        if !(0.0..=max).contains(&t) {
            return Err(DenoiserError::TimeRange { t, max });
        }
        Ok(t / max)
    }

    /// `(alpha, sigma)` at time `t`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64), DenoiserError> {
        let s = self.check(t)?;
        Ok(match self.mode {
            ScheduleMode::Flow => (1.0 - s, s),
            ScheduleMode::Diffusion => {
                let (sin, cos) = (FRAC_PI_2 * s).sin_cos();
                (cos, sin)
            }
        })
    }
}

/// `alpha_t x + sigma_t eps`.
pub fn noise_sample(
    x: &Tensor,
    t: f64,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DenoiserError> {
    let (alpha, sigma) = sched.coefficients(t)?;
    Ok(x.lincomb(alpha, eps, sigma)?)
}

/// Regression target: `alpha_t eps - sigma_t x` for diffusion, `eps - x` for flow.
pub fn regression_target(
    x: &Tensor,
    eps: &Tensor,
    t: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor, DenoiserError> {
    let (alpha, sigma) = sched.coefficients(t)?;
    Ok(match sched.mode {
        ScheduleMode::Diffusion => eps.lincomb(alpha, x, -sigma)?,
        ScheduleMode::Flow => eps.sub(x)?,
    })
}
