//! Minibatch training loop for [`TscParams`].

use serde::{Deserialize, Serialize};

use super::optim::{train_step, AdamState, DEFAULT_LR};
use super::tsc::{grad_params, TscParams};
use crate::data::ImageSequence;
use crate::diffusion::NoiseSchedule;
use crate::error::{AidError, Result};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimiser steps.
    pub steps: usize,
    /// Sequences per step.
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr: DEFAULT_LR,
        }
    }
}

/// Per-step mean squared error per real noise entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    /// Mean of the first and last `window` entries.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.losses.len();
        if window == 0 || n < window {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.losses[..window]),
            mean(&self.losses[n - window..]),
        ))
    }
}

/// Trains `params` in place. Each step draws `batch` sequences from `data`
/// and then the loss noise, all from `rng` in that order.
pub fn train(
    params: &mut TscParams,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    mut data: impl FnMut(&mut RngStream) -> Result<ImageSequence>,
) -> Result<LossCurve> {
    if cfg.batch == 0 {
        return Err(AidError::config("batch must be positive"));
    }
    let mut state = AdamState::new(params);
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| data(rng))
            .collect::<Result<Vec<_>>>()?;
        let entries: usize = batch
            .iter()
            .map(|s| (s.len() - 1) * 2 * s.shape().0 * s.shape().1)
            .sum();
        let (loss, grads) = grad_params(params, &batch, sched, rng)?;
        if !loss.is_finite() {
            return Err(AidError::numeric(format!("loss diverged at step {step}")));
        }
        train_step(params, &grads, &mut state, cfg.lr)?;
        curve.losses.push(loss / entries as f64);
    }
    Ok(curve)
}
