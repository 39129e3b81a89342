//! Adam optimiser over [`TscParams`].

use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use super::tsc::{ParamGradients, TscParams};
use crate::error::{AidError, Result};

/// Learning rate used when none is given.
pub const DEFAULT_LR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &TscParams) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &TscParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.v
    }
}

/// One Adam update `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn train_step(
    params: &mut TscParams,
    grads: &ParamGradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(AidError::arg(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let shapes_ok = params.tensors().len() == grads.tensors().len()
        && params.tensors().len() == state.m.len()
        && params
            .tensors()
            .iter()
            .zip(grads.tensors())
            .zip(&state.m)
            .all(|((p, g), m)| p.shape() == g.shape() && p.shape() == m.shape());
    if !shapes_ok {
        return Err(AidError::dim(
            "parameter, gradient and optimiser shapes differ",
        ));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let c1 = 1.0 - beta1.powf(state.step as f64);
    let c2 = 1.0 - beta2.powf(state.step as f64);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((p, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    if !params.is_finite() {
        return Err(AidError::numeric("parameters diverged after Adam step"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::tsc::TscConfig;
    use crate::numerics::RngStream;

    fn params() -> TscParams {
        let cfg = TscConfig {
            image: 4,
            patch: 2,
            dim: 3,
            hidden: 3,
            layers: 1,
            window: 2,
            steps: 3,
            conditional: true,
        };
        TscParams::init(cfg, &mut RngStream::new(0, 0)).unwrap()
    }

    fn filled(p: &TscParams, rng: &mut RngStream) -> ParamGradients {
        ParamGradients::from_tensors(
            p.tensors()
                .iter()
                .map(|t| Tensor::from_fn(t.rows(), t.cols(), |_, _| rng.normal()))
                .collect(),
        )
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let zero = ParamGradients::zeros_like(&p);
        train_step(&mut p, &zero, &mut s, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = params();
        let mut rng = RngStream::new(1, 0);
        let g = filled(&p, &mut rng);
        let mut s = AdamState::new(&p);
        train_step(&mut p, &g, &mut s, 1e-3).unwrap();
        let (m1, v1) = (s.first_moment().to_vec(), s.second_moment().to_vec());
        let zero = ParamGradients::zeros_like(&p);
        train_step(&mut p, &zero, &mut s, 1e-3).unwrap();
        for (a, b) in m1.iter().zip(s.first_moment()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(0.9 * x, *y);
            }
        }
        for (a, b) in v1.iter().zip(s.second_moment()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(0.999 * x, *y);
            }
        }
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // with zero moments, m_hat = g and v_hat = g^2
        let mut p = params();
        let before = p.clone();
        let mut rng = RngStream::new(2, 0);
        let g = filled(&p, &mut rng);
        let mut s = AdamState::new(&p);
        let lr = 0.01;
        train_step(&mut p, &g, &mut s, lr).unwrap();
        for ((a, b), gt) in before.tensors().iter().zip(p.tensors()).zip(g.tensors()) {
            for ((x, y), gi) in a.data().iter().zip(b.data()).zip(gt.data()) {
                let want = x - lr * gi / (gi.abs() + 1e-8);
                assert!((y - want).abs() < 1e-14, "{y} vs {want}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        let mut p = params();
        let mut s = AdamState::new(&p);
        let g = ParamGradients::zeros_like(&p);
        assert!(matches!(
            train_step(&mut p, &g, &mut s, 0.0),
            Err(AidError::Argument(_))
        ));
        assert!(train_step(&mut p, &g, &mut s, -1.0).is_err());
        assert_eq!(DEFAULT_LR, 1e-4);
    }
}
