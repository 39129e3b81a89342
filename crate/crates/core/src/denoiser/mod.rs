//! Noise predictors `eps_theta(x_n^t, t, x_{<n})`.
//!
//! Two implementations: [`GaussianOracle`], the exact conditional-mean
//! predictor for a known diagonal Gaussian prior, and [`TscNet`], a small
//! network with causal attention across conditioning frames that is trained
//! with the reverse-mode differentiator in [`tape`].

mod checkpoint;
mod optim;
pub mod tape;
mod train;
mod tsc;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{train_step, AdamConfig, AdamState, DEFAULT_LR};
pub use tape::{causal_attention, Tape, Tensor, Var};
pub use train::{train, LossCurve, TrainConfig};
pub use tsc::{
    grad_params, grad_params_with_draws, tsc_forward, ParamGradients, TscConfig, TscNet, TscParams,
};

use crate::data::ImageSequence;
use crate::diffusion::NoiseSchedule;
use crate::error::{AidError, Result};
use crate::numerics::ComplexArray2D;

/// One noisy frame to denoise. `n_cond` is the number of leading
/// conditioning frames visible to it (its sequence position).
#[derive(Clone, Copy, Debug)]
pub struct EpsQuery<'a> {
    pub xt: &'a ComplexArray2D,
    pub t: usize,
    pub n_cond: usize,
}

/// A noise predictor. `predict_batch` evaluates several queries that share
/// one conditioning sequence; query `q` may only look at
/// `cond[..q.n_cond]`.
pub trait Denoiser: Send + Sync {
    fn predict_batch(
        &self,
        cond: &[ComplexArray2D],
        queries: &[EpsQuery<'_>],
    ) -> Result<Vec<ComplexArray2D>>;

    /// Longest conditioning prefix the model can use, if bounded.
    fn max_context(&self) -> Option<usize> {
        None
    }

    /// Number of diffusion steps the model was built for, if fixed.
    fn num_steps(&self) -> Option<usize> {
        None
    }
}

/// Conditioning frames `x_{<n}` (oldest first) for a prediction at
/// position `n = cond_frames.len()`.
#[derive(Clone, Debug)]
pub struct DenoiserContext {
    cond_frames: Vec<ComplexArray2D>,
}

impl DenoiserContext {
    pub fn new(cond_frames: Vec<ComplexArray2D>) -> Result<Self> {
        if let Some(first) = cond_frames.first() {
            for f in &cond_frames[1..] {
                first.check_same_shape(f)?;
            }
        }
        Ok(Self { cond_frames })
    }

    pub fn from_sequence(seq: &ImageSequence) -> Self {
        Self {
            cond_frames: seq.frames().to_vec(),
        }
    }

    pub fn frames(&self) -> &[ComplexArray2D] {
        &self.cond_frames
    }

    pub fn position(&self) -> usize {
        self.cond_frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond_frames.is_empty()
    }

    /// Appends a frame, dropping the oldest ones beyond `window` if given.
    pub fn push(&mut self, frame: ComplexArray2D, window: Option<usize>) -> Result<()> {
        if let Some(first) = self.cond_frames.first() {
            first.check_same_shape(&frame)?;
        }
        self.cond_frames.push(frame);
        if let Some(w) = window {
            let excess = self.cond_frames.len().saturating_sub(w.max(1));
            self.cond_frames.drain(..excess);
        }
        Ok(())
    }

    /// The last `window` frames (all if shorter).
    pub fn tail(&self, window: Option<usize>) -> &[ComplexArray2D] {
        match window {
            Some(w) if self.cond_frames.len() > w => {
                &self.cond_frames[self.cond_frames.len() - w..]
            }
            _ => &self.cond_frames,
        }
    }
}

/// Single prediction `eps_theta(xt, t, ctx)`, conditioning on the most
/// recent frames the model can see.
pub fn predict_eps(
    model: &dyn Denoiser,
    xt: &ComplexArray2D,
    t: usize,
    ctx: &DenoiserContext,
) -> Result<ComplexArray2D> {
    for f in ctx.frames() {
        f.check_same_shape(xt)?;
    }
    let cond = ctx.tail(model.max_context());
    let query = EpsQuery {
        xt,
        t,
        n_cond: cond.len(),
    };
    let mut out = model.predict_batch(cond, &[query])?;
    Ok(out.remove(0))
}

/// Diagonal Gaussian prior: real and imaginary parts of pixel `i` are
/// independent with mean `mean[i]` and variance `var[i]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPriorSpec {
    mean: ComplexArray2D,
    var: Vec<f64>,
}

impl GaussianPriorSpec {
    pub fn new(mean: ComplexArray2D, var: Vec<f64>) -> Result<Self> {
        if var.len() != mean.len() {
            return Err(AidError::dim(format!(
                "prior variance has {} entries for {} pixels",
                var.len(),
                mean.len()
            )));
        }
        if var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(AidError::arg(
                "prior variance must be finite and nonnegative",
            ));
        }
        Ok(Self { mean, var })
    }

    /// Same variance at every pixel.
    pub fn isotropic(mean: ComplexArray2D, var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![var; n])
    }

    pub fn mean(&self) -> &ComplexArray2D {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }
}

/// `E[eps | xt]` under the prior, written as
/// `(xt - sqrt(ab) mu) sqrt(1 - ab) / (ab var + 1 - ab)`, which equals
/// `(xt - sqrt(ab) E[x0|xt]) / sqrt(1 - ab)` and stays finite as `ab -> 1`.
pub fn gaussian_eps(
    prior: &GaussianPriorSpec,
    xt: &ComplexArray2D,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ComplexArray2D> {
    prior.mean.check_same_shape(xt)?;
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = xt
        .data()
        .iter()
        .zip(prior.mean.data())
        .zip(&prior.var)
        .map(|((x, m), v)| (x - m * sa) * (sn / (ab * v + 1.0 - ab)))
        .collect();
    ComplexArray2D::new(xt.rows(), xt.cols(), data)
}

/// [`gaussian_eps`] as a [`Denoiser`]; conditioning frames are ignored.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    prior: GaussianPriorSpec,
    sched: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(prior: GaussianPriorSpec, sched: NoiseSchedule) -> Self {
        Self { prior, sched }
    }

    pub fn prior(&self) -> &GaussianPriorSpec {
        &self.prior
    }
}

impl Denoiser for GaussianOracle {
    fn predict_batch(
        &self,
        cond: &[ComplexArray2D],
        queries: &[EpsQuery<'_>],
    ) -> Result<Vec<ComplexArray2D>> {
        for f in cond {
            f.check_same_shape(&self.prior.mean)?;
        }
        queries
            .iter()
            .map(|q| gaussian_eps(&self.prior, q.xt, q.t, &self.sched))
            .collect()
    }

    fn num_steps(&self) -> Option<usize> {
        Some(self.sched.steps())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, q_sample};
    use crate::numerics::RngStream;
    use num_complex::Complex64;

    fn sched() -> NoiseSchedule {
        make_schedule(20, 1e-3, 0.3).unwrap()
    }

    #[test]
    fn point_mass_gives_the_only_consistent_noise() {
        let s = sched();
        let mut rng = RngStream::new(0, 0);
        let mu = rng.normal_array(4, 4);
        let prior = GaussianPriorSpec::isotropic(mu.clone(), 0.0).unwrap();
        let eps = rng.normal_array(4, 4);
        for t in [1, 7, 20] {
            let xt = q_sample(&mu, t, &eps, &s).unwrap();
            let pred = gaussian_eps(&prior, &xt, t, &s).unwrap();
            assert!(pred.max_abs_diff(&eps) < 1e-10);
        }
    }

    #[test]
    fn scalar_conditional_mean_matches_monte_carlo() {
        // mu = 0, var = 1, alpha_bar = 0.5: E[x0|xt] = sqrt(0.5) xt, so
        // E[eps|xt] = sqrt(0.5) xt as well. Check by binning MC draws.
        let s = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let prior = GaussianPriorSpec::isotropic(ComplexArray2D::zeros(1, 1), 1.0).unwrap();
        let mut rng = RngStream::new(1, 0);
        let (lo, hi) = (0.4, 0.6);
        let (mut sum, mut count) = (0.0, 0usize);
        for _ in 0..1_000_000 {
            let x0 = rng.normal();
            let e = rng.normal();
            let xt = 0.5f64.sqrt() * x0 + 0.5f64.sqrt() * e;
            if (lo..hi).contains(&xt) {
                sum += e;
                count += 1;
            }
        }
        let mc = sum / count as f64;
        let xt = ComplexArray2D::from_fn(1, 1, |_, _| Complex64::new(0.5, 0.0));
        let pred = gaussian_eps(&prior, &xt, 1, &s).unwrap().get(0, 0).re;
        assert!((pred - 0.5f64.sqrt() * 0.5).abs() < 1e-15);
        // the bin average of E[eps|xt] is sqrt(.5) * E[xt | bin] ~ sqrt(.5)*0.5
        let se = (0.5 / count as f64).sqrt();
        assert!((mc - pred).abs() < 4.0 * se + 2e-3, "mc {mc} pred {pred}");
    }

    #[test]
    fn continuous_as_alpha_bar_approaches_one() {
        let prior =
            GaussianPriorSpec::isotropic(ComplexArray2D::from_fn(1, 1, |_, _| 0.3.into()), 0.5)
                .unwrap();
        let xt = ComplexArray2D::from_fn(1, 1, |_, _| Complex64::new(0.8, -0.2));
        let mut prev: Option<Complex64> = None;
        for beta in [1e-4, 1e-6, 1e-8, 1e-10] {
            let s = NoiseSchedule::from_betas(vec![beta]).unwrap();
            let v = gaussian_eps(&prior, &xt, 1, &s).unwrap().get(0, 0);
            assert!(v.re.is_finite());
            if let Some(p) = prev {
                // tends to zero like sqrt(beta)
                assert!(v.norm() < p.norm());
            }
            prev = Some(v);
        }
        assert!(prev.unwrap().norm() < 1e-4);
    }

    #[test]
    fn oracle_beats_other_predictors_on_its_prior() {
        let s = sched();
        let mut rng = RngStream::new(2, 0);
        let mu = rng.normal_array(2, 2).scale(0.5);
        let prior = GaussianPriorSpec::new(mu.clone(), vec![0.2, 0.5, 1.0, 2.0]).unwrap();
        let (mut oracle, mut zero, mut naive) = (vec![], vec![], vec![]);
        for _ in 0..4000 {
            let x0 = ComplexArray2D::from_fn(2, 2, |r, c| {
                let sd = prior.var()[r * 2 + c].sqrt();
                mu.get(r, c) + rng.complex_normal() * sd
            });
            let t = rng.uniform_int(1, s.steps());
            let eps = rng.normal_array(2, 2);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let p = gaussian_eps(&prior, &xt, t, &s).unwrap();
            oracle.push((&p - &eps).norm_sqr());
            zero.push(eps.norm_sqr());
            let unit = GaussianPriorSpec::isotropic(ComplexArray2D::zeros(2, 2), 1.0).unwrap();
            let q = gaussian_eps(&unit, &xt, t, &s).unwrap();
            naive.push((&q - &eps).norm_sqr());
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
            (m, (var / v.len() as f64).sqrt())
        };
        let (mo, so) = stats(&oracle);
        for other in [&zero, &naive] {
            let diffs: Vec<f64> = other.iter().zip(&oracle).map(|(a, b)| a - b).collect();
            let (md, sd) = stats(&diffs);
            assert!(
                md > -3.0 * sd,
                "oracle loss {mo}±{so} not minimal: diff {md}±{sd}"
            );
        }
    }

    #[test]
    fn context_window_keeps_recent_frames() {
        let f = |v: f64| ComplexArray2D::from_fn(1, 1, |_, _| v.into());
        let mut ctx = DenoiserContext::new(vec![f(0.0)]).unwrap();
        for i in 1..6 {
            ctx.push(f(i as f64), Some(3)).unwrap();
        }
        let vals: Vec<f64> = ctx.frames().iter().map(|x| x.get(0, 0).re).collect();
        assert_eq!(vals, vec![3.0, 4.0, 5.0]);
        assert_eq!(ctx.tail(Some(2)).len(), 2);
        assert!(ctx.push(ComplexArray2D::zeros(2, 2), None).is_err());
    }
}
