//! Frame and sequence generation, posterior reconstruction from
//! undersampled k-space, and image-quality metrics.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::denoiser::{predict_eps, Denoiser, DenoiserContext};
use crate::diffusion::{ddim_step, ddpm_step, q_sample, NoiseSchedule};
use crate::error::{AidError, Result};
use crate::mri::{likelihood_grad, ForwardModel, KSpaceFrame};
use crate::numerics::{ComplexArray2D, RngStream};

/// Reverse update used by the generation chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Ddpm,
    Ddim,
}

impl FromStr for StepKind {
    type Err = AidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(StepKind::Ddpm),
            "ddim" => Ok(StepKind::Ddim),
            _ => Err(AidError::config(format!(
                "unknown sampler `{s}` (ddpm|ddim)"
            ))),
        }
    }
}

/// Generation modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    /// Frame `n` conditions on the original frames `x_{<n}`.
    Retrospective,
    /// Sliding window filled from the given frames.
    ProspectiveWarm,
    /// Sliding window filled with zeros.
    ProspectiveCold,
    /// Warm window; each chain starts from the noised previous frame at
    /// step `tau` instead of pure noise.
    Boosted,
}

impl GenMode {
    pub const ALL: [GenMode; 4] = [
        GenMode::Retrospective,
        GenMode::ProspectiveWarm,
        GenMode::ProspectiveCold,
        GenMode::Boosted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GenMode::Retrospective => "retrospective",
            GenMode::ProspectiveWarm => "warm",
            GenMode::ProspectiveCold => "cold",
            GenMode::Boosted => "boosted",
        }
    }
}

impl fmt::Display for GenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GenMode {
    type Err = AidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrospective" => Ok(GenMode::Retrospective),
            "warm" | "prospective-warm" => Ok(GenMode::ProspectiveWarm),
            "cold" | "prospective-cold" => Ok(GenMode::ProspectiveCold),
            "boosted" => Ok(GenMode::Boosted),
            _ => Err(AidError::config(format!(
                "unknown mode `{s}` (retrospective|warm|cold|boosted)"
            ))),
        }
    }
}

fn check_finite(x: &ComplexArray2D, what: impl FnOnce() -> String) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(AidError::numeric(format!("non-finite state at {}", what())))
    }
}

fn check_model_steps(model: &dyn Denoiser, sched: &NoiseSchedule) -> Result<()> {
    match model.num_steps() {
        Some(t) if t != sched.steps() => Err(AidError::config(format!(
            "model built for {t} steps, schedule has {}",
            sched.steps()
        ))),
        _ => Ok(()),
    }
}

/// Runs the reverse chain from `x` at step `from` down to `x^0`.
fn run_chain(
    model: &dyn Denoiser,
    ctx: &DenoiserContext,
    mut x: ComplexArray2D,
    from: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    kind: StepKind,
) -> Result<ComplexArray2D> {
    for t in (1..=from).rev() {
        let eps = predict_eps(model, &x, t, ctx)?;
        x = match kind {
            StepKind::Ddpm => ddpm_step(&x, &eps, t, sched, rng)?,
            StepKind::Ddim => ddim_step(&x, &eps, t, sched)?,
        };
        check_finite(&x, || format!("step {t}"))?;
    }
    Ok(x)
}

/// Draws one frame: `x^T ~ N(0, I)` followed by `T` reverse steps
/// conditioned on `ctx`.
pub fn sample_frame(
    model: &dyn Denoiser,
    ctx: &DenoiserContext,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    kind: StepKind,
) -> Result<ComplexArray2D> {
    let (rows, cols) = ctx
        .frames()
        .first()
        .ok_or_else(|| AidError::arg("sampling needs at least the known frame x_0"))?
        .shape();
    check_model_steps(model, sched)?;
    let x = rng.normal_array(rows, cols);
    run_chain(model, ctx, x, sched.steps(), sched, rng, kind)
}

/// Options for [`generate_sequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub step: StepKind,
    /// Restart depth for boosted sampling; `None` means `max(T / 4, 1)`.
    pub tau: Option<usize>,
    /// Frame shape for a cold start without `init`.
    pub shape: Option<(usize, usize)>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            step: StepKind::Ddpm,
            tau: None,
            shape: None,
        }
    }
}

/// Default boosted restart depth.
pub fn default_tau(steps: usize) -> usize {
    (steps / 4).max(1)
}

/// Generates `n_frames` frames in the given mode.
///
/// * retrospective: frame `i` conditions on `init[..=i]`, so `init` needs
///   at least `n_frames` frames;
/// * warm / boosted: the window starts as the last frames of `init`, which
///   must fill the model's context (or hold at least one frame if unbounded);
/// * cold: the window starts as zero frames.
///
/// Prospective modes append each generated frame and drop the oldest once
/// the window is full.
pub fn generate_sequence(
    model: &dyn Denoiser,
    init: &[ComplexArray2D],
    n_frames: usize,
    mode: GenMode,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    opts: &GenerateOptions,
) -> Result<Vec<ComplexArray2D>> {
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    check_model_steps(model, sched)?;
    let window = model.max_context();
    let keep = window.map(|w| w.max(1));
    let mut out = Vec::with_capacity(n_frames);
    match mode {
        GenMode::Retrospective => {
            if init.len() < n_frames {
                return Err(AidError::arg(format!(
                    "retrospective sampling of {n_frames} frames needs as many original frames, got {}",
                    init.len()
                )));
            }
            for i in 0..n_frames {
                let ctx = DenoiserContext::new(init[..=i].to_vec())?;
                out.push(sample_frame(model, &ctx, sched, rng, opts.step)?);
            }
        }
        GenMode::ProspectiveWarm | GenMode::Boosted => {
            let need = window.unwrap_or(1).max(1);
            if init.len() < need {
                return Err(AidError::arg(format!(
                    "warm start needs {need} initial frames, got {}",
                    init.len()
                )));
            }
            let mut ctx = DenoiserContext::new(init[init.len() - need..].to_vec())?;
            if window.is_none() {
                ctx = DenoiserContext::new(init.to_vec())?;
            }
            let tau = opts.tau.unwrap_or_else(|| default_tau(sched.steps()));
            if mode == GenMode::Boosted && (tau == 0 || tau > sched.steps()) {
                return Err(AidError::config(format!(
                    "boost depth {tau} outside 1..={}",
                    sched.steps()
                )));
            }
            for _ in 0..n_frames {
                let frame = if mode == GenMode::Boosted {
                    let prev = ctx.frames().last().expect("nonempty window");
                    let (r, c) = prev.shape();
                    let eps = rng.normal_array(r, c);
                    let x = q_sample(prev, tau, &eps, sched)?;
                    run_chain(model, &ctx, x, tau, sched, rng, opts.step)?
                } else {
                    sample_frame(model, &ctx, sched, rng, opts.step)?
                };
                ctx.push(frame.clone(), keep)?;
                out.push(frame);
            }
        }
        GenMode::ProspectiveCold => {
            let (r, c) = match (init.first(), opts.shape) {
                (Some(f), _) => f.shape(),
                (None, Some(s)) => s,
                (None, None) => {
                    return Err(AidError::arg("cold start needs a frame shape"));
                }
            };
            let zeros = vec![ComplexArray2D::zeros(r, c); window.unwrap_or(1).max(1)];
            let mut ctx = DenoiserContext::new(zeros)?;
            for _ in 0..n_frames {
                let frame = sample_frame(model, &ctx, sched, rng, opts.step)?;
                ctx.push(frame.clone(), keep)?;
                out.push(frame);
            }
        }
    }
    Ok(out)
}

/// Scale of the noise re-injected after the data-consistency step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// `sqrt(1 - alpha_bar_{t-1})`
    Cumulative,
    /// `sqrt(1 - alpha_{t-1})`
    PerStep,
}

impl FromStr for NoiseScale {
    type Err = AidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative" => Ok(NoiseScale::Cumulative),
            "per-step" => Ok(NoiseScale::PerStep),
            _ => Err(AidError::config(format!(
                "unknown noise scale `{s}` (cumulative|per-step)"
            ))),
        }
    }
}

/// Posterior sampling settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    /// Data-consistency step size `lambda`.
    pub lambda: f64,
    /// Data-consistency iterations per diffusion step `K`.
    pub k_iters: usize,
    /// Independent posterior chains `S`.
    pub samples: usize,
    pub noise_inject: bool,
    pub noise_scale: NoiseScale,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            k_iters: 5,
            samples: 1,
            noise_inject: true,
            noise_scale: NoiseScale::Cumulative,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(AidError::config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.samples == 0 {
            return Err(AidError::config("need at least one sample"));
        }
        Ok(())
    }
}

/// `frames[n][s]` is sample `s` of frame `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSamples {
    frames: Vec<Vec<ComplexArray2D>>,
}

impl PosteriorSamples {
    pub fn new(frames: Vec<Vec<ComplexArray2D>>) -> Result<Self> {
        let s = frames.first().map_or(0, Vec::len);
        let shape = frames.first().and_then(|f| f.first()).map(|x| x.shape());
        for f in &frames {
            if f.len() != s || s == 0 {
                return Err(AidError::dim(
                    "every frame needs the same positive sample count",
                ));
            }
            for x in f {
                if Some(x.shape()) != shape {
                    return Err(AidError::dim("posterior samples differ in shape"));
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_samples(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn frame(&self, n: usize) -> &[ComplexArray2D] {
        &self.frames[n]
    }

    pub fn frames(&self) -> &[Vec<ComplexArray2D>] {
        &self.frames
    }
}

/// One posterior chain over all frames.
fn recon_chain(
    model: &dyn Denoiser,
    fwd: &ForwardModel,
    kspace: &[KSpaceFrame],
    x0: &ComplexArray2D,
    cfg: &ReconConfig,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Vec<ComplexArray2D>> {
    let (rows, cols) = x0.shape();
    let keep = model.max_context().map(|w| w.max(1));
    let mut ctx = DenoiserContext::new(vec![x0.clone()])?;
    let mut out = Vec::with_capacity(kspace.len());
    for (n, y) in kspace.iter().enumerate() {
        let mut x = rng.normal_array(rows, cols);
        for t in (1..=sched.steps()).rev() {
            let eps = predict_eps(model, &x, t, &ctx)?;
            x = ddim_step(&x, &eps, t, sched)?;
            for _ in 0..cfg.k_iters {
                let g = likelihood_grad(fwd, y, &x)?;
                x.axpy(cfg.lambda, &g)?;
            }
            if cfg.noise_inject && t > 1 {
                let var = match cfg.noise_scale {
                    NoiseScale::Cumulative => 1.0 - sched.alpha_bar(t - 1),
                    NoiseScale::PerStep => 1.0 - sched.alpha(t - 1),
                };
                let s = var.sqrt();
                for z in x.data_mut() {
                    *z += rng.complex_normal() * s;
                }
            }
            check_finite(&x, || format!("frame {}, step {t}", n + 1))?;
        }
        ctx.push(x.clone(), keep)?;
        out.push(x);
    }
    Ok(out)
}

/// Posterior sampling over a k-space sequence: for each frame in order,
/// reverse DDIM steps interleaved with `K` gradient-ascent data-consistency
/// updates and optional noise re-injection; the finished frame joins the
/// conditioning of the next. `S` chains run on split streams
/// `rng.split(s)` and may execute in parallel without changing results.
pub fn reconstruct(
    model: &dyn Denoiser,
    fwd: &ForwardModel,
    kspace: &[KSpaceFrame],
    x0: &ComplexArray2D,
    cfg: &ReconConfig,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    check_model_steps(model, sched)?;
    if x0.shape() != fwd.shape() {
        return Err(AidError::dim(format!(
            "x0 {:?} vs operator {:?}",
            x0.shape(),
            fwd.shape()
        )));
    }
    for y in kspace {
        y.check(fwd)?;
    }
    if kspace.is_empty() {
        return Err(AidError::arg("no k-space frames to reconstruct"));
    }
    let chains = (0..cfg.samples)
        .into_par_iter()
        .map(|s| {
            let mut r = rng.split(s as u64);
            recon_chain(model, fwd, kspace, x0, cfg, sched, &mut r)
        })
        .collect::<Vec<Result<Vec<ComplexArray2D>>>>();
    let mut frames: Vec<Vec<ComplexArray2D>> = (0..kspace.len())
        .map(|_| Vec::with_capacity(cfg.samples))
        .collect();
    for chain in chains {
        for (n, x) in chain?.into_iter().enumerate() {
            frames[n].push(x);
        }
    }
    PosteriorSamples::new(frames)
}

/// Posterior mean with magnitude variance and 95% confidence half-widths.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub mean: ComplexArray2D,
    /// Unbiased sample variance of the pixel magnitudes.
    pub variance: Vec<f64>,
    /// `t(0.975, S - 1) * sqrt(variance / S)`
    pub ci_halfwidth: Vec<f64>,
}

impl UncertaintyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }
}

/// Two-sided 95% Student-t quantile with `dof` degrees of freedom.
pub fn t_score_95(dof: usize) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| AidError::arg(format!("t distribution with {dof} dof: {e}")))?;
    Ok(dist.inverse_cdf(0.975))
}

/// MMSE estimate (pixelwise mean) of frame `frame` with its uncertainty.
pub fn mmse_and_ci(samples: &PosteriorSamples, frame: usize) -> Result<UncertaintyMap> {
    if frame >= samples.n_frames() {
        return Err(AidError::arg(format!(
            "frame {frame} out of {}",
            samples.n_frames()
        )));
    }
    let xs = samples.frame(frame);
    let s = xs.len();
    if s < 2 {
        return Err(AidError::arg("confidence maps need at least two samples"));
    }
    let (rows, cols) = xs[0].shape();
    let mut mean = ComplexArray2D::zeros(rows, cols);
    for x in xs {
        mean.axpy(1.0, x)?;
    }
    let mean = mean.scale(1.0 / s as f64);
    let npix = rows * cols;
    let mut mag_mean = vec![0.0; npix];
    for x in xs {
        for (m, z) in mag_mean.iter_mut().zip(x.data()) {
            *m += z.norm();
        }
    }
    for m in &mut mag_mean {
        *m /= s as f64;
    }
    let mut variance = vec![0.0; npix];
    for x in xs {
        for ((v, z), m) in variance.iter_mut().zip(x.data()).zip(&mag_mean) {
            let d = z.norm() - m;
            *v += d * d;
        }
    }
    for v in &mut variance {
        *v /= (s - 1) as f64;
    }
    let tq = t_score_95(s - 1)?;
    let ci_halfwidth = variance
        .iter()
        .map(|v| tq * (v / s as f64).sqrt())
        .collect();
    Ok(UncertaintyMap {
        mean,
        variance,
        ci_halfwidth,
    })
}

fn magnitude_errors(reference: &ComplexArray2D, est: &ComplexArray2D) -> Result<(f64, f64, f64)> {
    reference.check_same_shape(est)?;
    let (mut se, mut ref_sq, mut peak) = (0.0, 0.0, 0.0f64);
    for (r, e) in reference.data().iter().zip(est.data()) {
        let (a, b) = (r.norm(), e.norm());
        se += (b - a) * (b - a);
        ref_sq += a * a;
        peak = peak.max(a);
    }
    if peak == 0.0 {
        return Err(AidError::arg("reference image is zero"));
    }
    Ok((se, ref_sq, peak))
}

/// `10 log10(max|ref|^2 / MSE)` on magnitude images; `+inf` when equal.
pub fn psnr(reference: &ComplexArray2D, est: &ComplexArray2D) -> Result<f64> {
    let (se, _, peak) = magnitude_errors(reference, est)?;
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = se / reference.len() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `|| |est| - |ref| || / || |ref| ||`.
pub fn nrmse(reference: &ComplexArray2D, est: &ComplexArray2D) -> Result<f64> {
    let (se, ref_sq, _) = magnitude_errors(reference, est)?;
    Ok((se / ref_sq).sqrt())
}
