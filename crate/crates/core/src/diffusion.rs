//! Noise schedules, forward marginals, posterior parameters, the DDPM and
//! DDIM reverse updates, and the autoregressive training loss.
//!
//! Time steps are 1-based (`t = 1..=T`) and `alpha_bar(0) = 1`, so the
//! posterior and the DDIM update are defined down to `t = 1`.

use serde::{Deserialize, Serialize};

use crate::data::ImageSequence;
use crate::denoiser::{Denoiser, EpsQuery};
use crate::error::{AidError, Result};
use crate::numerics::{squared_distance, ComplexArray2D, RngStream};

/// Linear beta schedule with the derived `alpha`, `alpha_bar` and posterior
/// variance `beta_tilde`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Default linear endpoints for `steps`: `(1e-4, 0.02)` at 1000 steps,
/// scaled by `1000 / steps` otherwise so that `alpha_bar(T)` stays near zero.
pub fn default_betas(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps.max(1) as f64;
    (1e-4 * scale, (0.02 * scale).min(0.999))
}

/// Builds a linear schedule from `beta_min` to `beta_max` over `steps` steps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(AidError::arg("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(AidError::arg(format!(
            "need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Schedule from explicit betas, which must be strictly increasing in (0, 1).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(AidError::arg("empty beta schedule"));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(AidError::arg("every beta must lie in (0, 1)"));
        }
        if beta.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AidError::arg("betas must be strictly increasing"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let beta_tilde = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    /// Default linear schedule for `steps` (see [`default_betas`]).
    pub fn linear(steps: usize) -> Result<Self> {
        let (lo, hi) = default_betas(steps);
        if steps == 1 {
            return make_schedule(1, lo, 0.999);
        }
        make_schedule(steps, lo, hi)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            t >= 1 && t <= self.steps(),
            "time step {t} out of 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(AidError::arg(format!(
                "time step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.idx(t)]
        }
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn check_shapes(a: &ComplexArray2D, b: &ComplexArray2D) -> Result<()> {
    a.check_same_shape(b)
}

/// Forward marginal draw `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(
    x0: &ComplexArray2D,
    t: usize,
    eps: &ComplexArray2D,
    sched: &NoiseSchedule,
) -> Result<ComplexArray2D> {
    sched.check_step(t)?;
    check_shapes(x0, eps)?;
    let ab = sched.alpha_bar(t);
    ComplexArray2D::lincomb(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps)
}

/// Mean and variance of `q(x_{t-1} | x_t, x_0)`.
pub fn q_posterior_params(
    x0: &ComplexArray2D,
    xt: &ComplexArray2D,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(ComplexArray2D, f64)> {
    sched.check_step(t)?;
    check_shapes(x0, xt)?;
    let (c0, ct) = posterior_coefficients(t, sched);
    Ok((
        ComplexArray2D::lincomb(c0, x0, ct, xt)?,
        sched.beta_tilde(t),
    ))
}

/// Coefficients of `x0` and `x_t` in the posterior mean.
pub fn posterior_coefficients(t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    (
        ab_prev.sqrt() * beta / (1.0 - ab),
        alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
    )
}

/// Noise-free part of the DDPM reverse step.
pub fn ddpm_mean(
    xt: &ComplexArray2D,
    eps_pred: &ComplexArray2D,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ComplexArray2D> {
    sched.check_step(t)?;
    check_shapes(xt, eps_pred)?;
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let k = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    ComplexArray2D::lincomb(inv_sqrt_alpha, xt, -k * inv_sqrt_alpha, eps_pred)
}

/// Ancestral DDPM step with fixed variance `beta_t`; no noise at `t = 1`.
pub fn ddpm_step(
    xt: &ComplexArray2D,
    eps_pred: &ComplexArray2D,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<ComplexArray2D> {
    let mut mean = ddpm_mean(xt, eps_pred, t, sched)?;
    if t > 1 {
        let s = sched.beta(t).sqrt();
        for z in mean.data_mut() {
            *z += rng.complex_normal() * s;
        }
    }
    Ok(mean)
}

/// Deterministic DDIM update from `t` to `t - 1`.
pub fn ddim_step(
    xt: &ComplexArray2D,
    eps_pred: &ComplexArray2D,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ComplexArray2D> {
    sched.check_step(t)?;
    check_shapes(xt, eps_pred)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let x0_hat = ComplexArray2D::lincomb(
        1.0 / ab.sqrt(),
        xt,
        -(1.0 - ab).sqrt() / ab.sqrt(),
        eps_pred,
    )?;
    ComplexArray2D::lincomb(ab_prev.sqrt(), &x0_hat, (1.0 - ab_prev).sqrt(), eps_pred)
}

/// Time step and noise drawn for one target position.
#[derive(Clone, Debug, PartialEq)]
pub struct LossDraw {
    pub t: usize,
    pub eps: ComplexArray2D,
}

/// Total and per-position terms of the training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<f64>,
}

/// Draws `(t, eps)` for target positions `1..N` of `seq`, in position order.
pub fn draw_loss_noise(
    seq: &ImageSequence,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Vec<LossDraw>> {
    if seq.len() < 2 {
        return Err(AidError::arg(
            "loss needs a conditioning frame and at least one target",
        ));
    }
    let (rows, cols) = seq.shape();
    Ok((1..seq.len())
        .map(|_| {
            let t = rng.uniform_int(1, sched.steps());
            let eps = rng.normal_array(rows, cols);
            LossDraw { t, eps }
        })
        .collect())
}

/// Noisy targets `x_n^t` for the given draws.
pub fn noisy_targets(
    seq: &ImageSequence,
    draws: &[LossDraw],
    sched: &NoiseSchedule,
) -> Result<Vec<ComplexArray2D>> {
    if draws.len() + 1 != seq.len() {
        return Err(AidError::arg(format!(
            "{} draws for a sequence of {} frames",
            draws.len(),
            seq.len()
        )));
    }
    draws
        .iter()
        .zip(&seq.frames()[1..])
        .map(|(d, x)| q_sample(x, d.t, &d.eps, sched))
        .collect()
}

/// Loss with explicit draws; every target is predicted in one batched call.
pub fn aid_loss_with_draws(
    model: &dyn Denoiser,
    seq: &ImageSequence,
    draws: &[LossDraw],
    sched: &NoiseSchedule,
) -> Result<LossReport> {
    let targets = noisy_targets(seq, draws, sched)?;
    let cond = &seq.frames()[..seq.len() - 1];
    let queries: Vec<EpsQuery<'_>> = targets
        .iter()
        .zip(draws)
        .enumerate()
        .map(|(i, (xt, d))| EpsQuery {
            xt,
            t: d.t,
            n_cond: i + 1,
        })
        .collect();
    let preds = model.predict_batch(cond, &queries)?;
    loss_terms(&preds, draws)
}

/// Sum of squared prediction errors per position, then their sum.
pub fn loss_terms(preds: &[ComplexArray2D], draws: &[LossDraw]) -> Result<LossReport> {
    let terms = preds
        .iter()
        .zip(draws)
        .map(|(p, d)| squared_distance(p, &d.eps))
        .collect::<Result<Vec<f64>>>()?;
    let total = terms.iter().sum();
    Ok(LossReport { total, terms })
}

/// Stochastic estimate of the autoregressive denoising objective: one
/// `(t, eps)` draw per target position `n = 1..N`, with `x_0..x_{n-1}` as
/// conditioning.
pub fn aid_loss(
    model: &dyn Denoiser,
    seq: &ImageSequence,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<LossReport> {
    let draws = draw_loss_noise(seq, sched, rng)?;
    aid_loss_with_draws(model, seq, &draws, sched)
}
