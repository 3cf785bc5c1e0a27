use rayon::prelude::*;

use super::model::{loss_and_gradients, training_loss, DenoiserParams, TrainSample};
use super::schedule::NoiseSchedule;
use super::DenoiserError;
use crate::tensor::Tensor;

/// Adam optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &DenoiserParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, params: &mut DenoiserParams, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Parameters and optimizer state at the moment training halted.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub optimizer: Adam,
}

/// Mean loss over `batch` and its gradient, evaluated in parallel and
/// reduced in batch order.
pub fn batch_gradients(
    batch: &[TrainSample],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>), DenoiserError> {
    if batch.is_empty() {
        return Err(DenoiserError::Config("empty training batch".into()));
    }
    let per_sample: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| loss_and_gradients(s, params, sched))
        .collect::<Result<_, _>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Tensor> = params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    for (l, g) in &per_sample {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        *g = g.scale(1.0 / n);
    }
    Ok((loss / n, grads))
}

/// One Adam update on the mean batch loss. Returns the loss before the update.
///
/// A non-finite loss or gradient leaves the parameters untouched and reports
/// a divergence carrying the current state.
pub fn train_step(
    batch: &[TrainSample],
    params: &mut DenoiserParams,
    optimizer: &mut Adam,
    sched: &NoiseSchedule,
) -> Result<f64, DenoiserError> {
    let (loss, grads) = batch_gradients(batch, params, sched)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(DenoiserError::Divergence {
            step: optimizer.step,
            loss,
            snapshot: Box::new(TrainState {
                params: params.clone(),
                optimizer: optimizer.clone(),
            }),
        });
    }
    optimizer.apply(params, &grads);
    Ok(loss)
}

/// Mean of [`training_loss`] over `samples`.
pub fn mean_loss(
    samples: &[TrainSample],
    params: &DenoiserParams,
    sched: &NoiseSchedule,
) -> Result<f64, DenoiserError> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| training_loss(s, params, sched))
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
