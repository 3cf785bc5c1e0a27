//! Euler sampling with dual image/text classifier-free guidance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{
    denoiser_forward, Conditioning, DenoiserError, DenoiserParams, NoiseSchedule, ScheduleMode,
};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampling diverged at step {step}")]
    Divergence { step: usize },
    #[error("step index {index} out of range for {steps} steps")]
    StepRange { index: usize, steps: usize },
    #[error("invalid guidance configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum GuidanceMode {
    /// Both guidance vectors rescaled to the smaller of their norms.
    Normalized,
    /// Plain sum of the weighted guidance vectors.
    Vanilla,
    /// Vanilla guidance followed by a std-ratio correction towards the
    /// fully conditioned prediction, blended by `phi`.
    Rescale { phi: f64 },
}

impl GuidanceMode {
    /// Parses `normalized`, `vanilla` or `rescale` (the latter taking `phi`).
    pub fn parse(name: &str, phi: f64) -> Result<Self, SamplerError> {
        match name {
            "normalized" => Ok(Self::Normalized),
            "vanilla" => Ok(Self::Vanilla),
            "rescale" => Ok(Self::Rescale { phi }),
            other => Err(SamplerError::Config(format!(
                "unknown guidance mode `{other}` (expected normalized, vanilla or rescale)"
            ))),
        }
    }
}

/// Guidance weights and image-guidance ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    /// Image guidance weight at the first step.
    pub lambda_i: f64,
    /// Total linear increase of the image weight over the run.
    pub lambda_i_ramp: f64,
    pub lambda_c: f64,
    pub mode: GuidanceMode,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.lambda_i >= 0.0
            && self.lambda_c >= 0.0
            && self.lambda_i + self.lambda_i_ramp >= 0.0)
        {
            return Err(SamplerError::Config(
                "guidance weights must be nonnegative".into(),
            ));
        }
        if let GuidanceMode::Rescale { phi } = self.mode {
            if !(0.0..=1.0).contains(&phi) {
                return Err(SamplerError::Config(format!("phi = {phi} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// The three model evaluations of one guided step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceStep {
    /// References, no caption.
    pub eps_uncond: Tensor,
    /// Neither references nor caption.
    pub eps_base: Tensor,
    /// References and caption.
    pub eps_full: Tensor,
}

impl GuidanceStep {
    /// Image guidance `eps_uncond - eps_base`.
    pub fn g_image(&self) -> Result<Tensor, SamplerError> {
        Ok(self.eps_uncond.sub(&self.eps_base)?)
    }

    /// Text guidance `eps_full - eps_uncond`.
    pub fn g_text(&self) -> Result<Tensor, SamplerError> {
        Ok(self.eps_full.sub(&self.eps_uncond)?)
    }
}

/// `eps_uncond + lambda_i (|g|/|g_I|) g_I + lambda_c (|g|/|g_c|) g_c` with
/// `|g| = min(|g_I|, |g_c|)` over the whole tensor.
///
/// A guidance vector with norm below `1e-12` drops out and the other's norm
/// is used; if both vanish the unguided prediction is returned.
pub fn guidance_combine_normalized(
    step: &GuidanceStep,
    lambda_i: f64,
    lambda_c: f64,
) -> Result<Tensor, SamplerError> {
    let (gi, gc) = (step.g_image()?, step.g_text()?);
    let (ni, nc) = (gi.norm(), gc.norm());
    let live_i = ni >= NORM_GUARD;
    let live_c = nc >= NORM_GUARD;
    let target = match (live_i, live_c) {
        (true, true) => ni.min(nc),
        (true, false) => ni,
        (false, true) => nc,
        (false, false) => {
            log::debug!("both guidance vectors vanish; returning the unguided prediction");
            return Ok(step.eps_uncond.clone());
        }
    };
    let mut out = step.eps_uncond.clone();
    if live_i {
        out = out.lincomb(1.0, &gi, lambda_i * target / ni)?;
    }
    if live_c {
        out = out.lincomb(1.0, &gc, lambda_c * target / nc)?;
    }
    Ok(out)
}

/// `eps_uncond + lambda_i g_I + lambda_c g_c`.
pub fn guidance_combine_vanilla(
    step: &GuidanceStep,
    lambda_i: f64,
    lambda_c: f64,
) -> Result<Tensor, SamplerError> {
    let out = step.eps_uncond.lincomb(1.0, &step.g_image()?, lambda_i)?;
    Ok(out.lincomb(1.0, &step.g_text()?, lambda_c)?)
}

/// Population standard deviation of each channel (last dimension) over all
/// other positions.
pub fn channel_std(x: &Tensor) -> Vec<f64> {
    let c = x.last_dim();
    let n = x.outer_len() as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    var.into_iter().map(f64::sqrt).collect()
}

/// `phi (r combined) + (1 - phi) combined` with `r = std(eps_full) / std(combined)`
/// per channel; channels whose combined std is below `1e-12` pass through.
pub fn guidance_rescale(
    combined: &Tensor,
    eps_full: &Tensor,
    phi: f64,
) -> Result<Tensor, SamplerError> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(SamplerError::Config(format!("phi = {phi} outside [0, 1]")));
    }
    if combined.shape() != eps_full.shape() {
        return Err(TensorError::Shape {
            op: "guidance_rescale",
            left: combined.shape().to_vec(),
            right: eps_full.shape().to_vec(),
        }
        .into());
    }
    let (sc, sf) = (channel_std(combined), channel_std(eps_full));
    let factors: Vec<f64> = sc
        .iter()
        .zip(&sf)
        .map(|(&c, &f)| {
            if c < NORM_GUARD {
                1.0
            } else {
                phi * f / c + (1.0 - phi)
            }
        })
        .collect();
    let mut out = combined.clone();
    for row in out.data_mut().chunks_mut(factors.len()) {
        for (v, f) in row.iter_mut().zip(&factors) {
            *v *= f;
        }
    }
    Ok(out)
}

/// Combines one step's predictions according to `mode`.
pub fn guidance_combine(
    step: &GuidanceStep,
    mode: GuidanceMode,
    lambda_i: f64,
    lambda_c: f64,
) -> Result<Tensor, SamplerError> {
    match mode {
        GuidanceMode::Normalized => guidance_combine_normalized(step, lambda_i, lambda_c),
        GuidanceMode::Vanilla => guidance_combine_vanilla(step, lambda_i, lambda_c),
        GuidanceMode::Rescale { phi } => guidance_rescale(
            &guidance_combine_vanilla(step, lambda_i, lambda_c)?,
            &step.eps_full,
            phi,
        ),
    }
}

/// Image guidance weight at `step_index`: linear from `lambda_i` to
/// `lambda_i + lambda_i_ramp` over the run.
pub fn guidance_schedule_value(
    cfg: &GuidanceConfig,
    step_index: usize,
    steps: usize,
) -> Result<f64, SamplerError> {
    if step_index >= steps {
        return Err(SamplerError::StepRange {
            index: step_index,
            steps,
        });
    }
    if steps == 1 {
        return Ok(cfg.lambda_i);
    }
    Ok(cfg.lambda_i + cfg.lambda_i_ramp * step_index as f64 / (steps - 1) as f64)
}

/// Which conditioning a model call receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// References and caption.
    Full,
    /// References only.
    Uncond,
    /// Neither.
    Base,
}

/// A model that can be queried under the three guidance branches.
pub trait GuidedModel {
    fn predict(&self, x: &Tensor, t: f64, branch: Branch) -> Result<Tensor, SamplerError>;
}

impl<F> GuidedModel for F
where
    F: Fn(&Tensor, f64, Branch) -> Result<Tensor, SamplerError>,
{
    fn predict(&self, x: &Tensor, t: f64, branch: Branch) -> Result<Tensor, SamplerError> {
        self(x, t, branch)
    }
}

/// Evaluates the three branches at `(x, t)`.
pub fn guidance_step(
    model: &impl GuidedModel,
    x: &Tensor,
    t: f64,
) -> Result<GuidanceStep, SamplerError> {
    Ok(GuidanceStep {
        eps_uncond: model.predict(x, t, Branch::Uncond)?,
        eps_base: model.predict(x, t, Branch::Base)?,
        eps_full: model.predict(x, t, Branch::Full)?,
    })
}

/// Times `T (1 - i / steps)` for `i = 0..=steps`.
pub fn time_grid(sched: &NoiseSchedule, steps: usize) -> Vec<f64> {
    let max = sched.steps as f64;
    (0..=steps)
        .map(|i| max * (1.0 - i as f64 / steps as f64))
        .collect()
}

/// One Euler step from `t_from` to `t_to` given the model output `v`.
///
/// Flow moves along `t` directly; diffusion moves along the angle
/// `pi t / 2T`, on which the velocity is the exact derivative.
pub fn euler_update(
    x: &Tensor,
    v: &Tensor,
    t_from: f64,
    t_to: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor, SamplerError> {
    let ds = (t_from - t_to) / sched.steps as f64;
    let delta = match sched.mode {
        ScheduleMode::Flow => ds,
        ScheduleMode::Diffusion => std::f64::consts::FRAC_PI_2 * ds,
    };
    Ok(x.lincomb(1.0, v, -delta)?)
}

/// Guided Euler sampling from unit Gaussian noise of `shape`.
pub fn euler_sample(
    model: &impl GuidedModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    shape: &[usize],
    rng: &mut Rng,
    steps: usize,
) -> Result<Tensor, SamplerError> {
    euler_sample_with(
        model,
        sched,
        cfg,
        Tensor::randn(shape, rng),
        steps,
        |_, _| Ok(()),
    )
}

/// [`euler_sample`] from a given initial state, calling `hook(step, x)` after
/// every update.
pub fn euler_sample_with(
    model: &impl GuidedModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    init: Tensor,
    steps: usize,
    mut hook: impl FnMut(usize, &mut Tensor) -> Result<(), SamplerError>,
) -> Result<Tensor, SamplerError> {
    if steps == 0 {
        return Err(SamplerError::Config(
            "at least one sampling step is needed".into(),
        ));
    }
    cfg.validate()?;
    let times = time_grid(sched, steps);
    let mut x = init;
    for i in 0..steps {
        let lambda_i = guidance_schedule_value(cfg, i, steps)?;
        let step = guidance_step(model, &x, times[i])?;
        let v = guidance_combine(&step, cfg.mode, lambda_i, cfg.lambda_c)?;
        x = euler_update(&x, &v, times[i], times[i + 1], sched)?;
        hook(i, &mut x)?;
        if !x.is_finite() {
            return Err(SamplerError::Divergence { step: i });
        }
    }
    Ok(x)
}

/// The toy denoiser exposed through the three guidance branches.
///
/// Unconditional branches use `negative` as their caption when one is given.
pub struct DenoiserModel<'a> {
    pub params: &'a DenoiserParams,
    pub sched: &'a NoiseSchedule,
    pub caption: Option<&'a Tensor>,
    pub negative: Option<&'a Tensor>,
    pub refs: &'a [Tensor],
    /// Fixed per-reference noise used in reference-noisy mode.
    pub ref_noise: &'a [Tensor],
    pub depth: Option<&'a Tensor>,
}

impl GuidedModel for DenoiserModel<'_> {
    fn predict(&self, x: &Tensor, t: f64, branch: Branch) -> Result<Tensor, SamplerError> {
        let full = Conditioning {
            caption: self.caption,
            refs: self.refs,
            ref_noise: self.ref_noise,
            depth: self.depth,
            ref_rows: None,
        };
        let cond = match branch {
            Branch::Full => full,
            Branch::Uncond => Conditioning {
                caption: self.negative,
                ..full
            },
            Branch::Base => Conditioning {
                caption: self.negative,
                ..full.without(true, false)
            },
        };
        Ok(denoiser_forward(self.params, self.sched, x, t, &cond)?)
    }
}
