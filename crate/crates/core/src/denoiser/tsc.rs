//! Temporal-spatial-conditioning noise predictor.
//!
//! Each frame is cut into `P x P` patches; a patch becomes one token of
//! `2 P^2` reals (re/im interleaved per pixel). Conditioning frames are
//! embedded, tagged with frame and grid positions, and passed through `L`
//! pre-norm blocks whose attention runs causally across frames, separately
//! for every patch location. The noisy target token at location `g` adds a
//! projection of the conditioning feature of the newest visible frame at
//! `g`, is modulated by a learned per-step scale/shift, refined by a
//! residual tanh MLP and projected back to pixels; the output is scaled by a
//! learned per-step gain and a learned per-step multiple of the noisy input
//! is added.
//!
//! Token rows are frame-major: row `i * G + g` is frame `i`, location `g`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Tensor, Var};
use super::{Denoiser, DenoiserContext, EpsQuery};
use crate::data::ImageSequence;
use crate::diffusion::{draw_loss_noise, loss_terms, noisy_targets, LossDraw, NoiseSchedule};
use crate::error::{AidError, Result};
use crate::numerics::{ComplexArray2D, RngStream};

/// Per-real-component image variance assumed by
/// [`TscParams::init_for_schedule`].
pub const DATA_VAR: f64 = 0.25;

/// Hyperparameters of the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TscConfig {
    /// Image side length `n`.
    pub image: usize,
    /// Patch side `P`; must divide `image`.
    pub patch: usize,
    /// Token width `d`.
    pub dim: usize,
    /// Hidden width of the feed-forward layers.
    pub hidden: usize,
    /// Number of conditioning blocks `L`.
    pub layers: usize,
    /// Longest usable conditioning prefix.
    pub window: usize,
    /// Diffusion steps `T` (rows of the time tables).
    pub steps: usize,
    /// Without conditioning the net ignores all previous frames.
    pub conditional: bool,
}

impl TscConfig {
    pub fn new(image: usize, steps: usize) -> Self {
        Self {
            image,
            patch: 2,
            dim: 24,
            hidden: 48,
            layers: 1,
            window: 4,
            steps,
            conditional: true,
        }
    }

    pub fn unconditional(mut self) -> Self {
        self.conditional = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AidError::config(m));
        if self.image == 0 || self.patch == 0 || !self.image.is_multiple_of(self.patch) {
            return bad(format!(
                "patch size {} must divide image size {}",
                self.patch, self.image
            ));
        }
        if self.dim == 0 || self.hidden == 0 {
            return bad("dim and hidden must be positive".into());
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.conditional && self.window == 0 {
            return bad("conditional model needs window >= 1".into());
        }
        Ok(())
    }

    /// Patch locations per frame `G`.
    pub fn grid(&self) -> usize {
        let g = self.image / self.patch;
        g * g
    }

    /// Reals per token `2 P^2`.
    pub fn token_len(&self) -> usize {
        2 * self.patch * self.patch
    }

    /// Names and shapes of all weight tensors, in storage order.
    pub fn tensor_specs(&self) -> Vec<(String, (usize, usize))> {
        let (d, h, tl) = (self.dim, self.hidden, self.token_len());
        let mut v: Vec<(String, (usize, usize))> = Vec::new();
        let mut add = |name: &str, shape| v.push((name.to_string(), shape));
        add("grid.pos", (self.grid(), d));
        if self.conditional {
            add("cond.embed", (tl, d));
            add("cond.pos", (self.window, d));
            for l in 0..self.layers {
                for w in ["wq", "wk", "wv", "wo"] {
                    add(&format!("layer{l}.{w}"), (d, d));
                }
                add(&format!("layer{l}.ff1"), (d, h));
                add(&format!("layer{l}.ff1_b"), (1, h));
                add(&format!("layer{l}.ff2"), (h, d));
            }
            add("cond.proj", (d, d));
        }
        add("target.embed", (tl, d));
        add("time.scale", (self.steps, d));
        add("time.shift", (self.steps, d));
        add("time.skip", (self.steps, tl));
        add("time.gain", (self.steps, tl));
        add("head.ff1", (d, h));
        add("head.ff1_b", (1, h));
        add("head.ff2", (h, d));
        add("head.out", (d, tl));
        v
    }
}

/// Named weight tensors of a [`TscConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TscParams {
    config: TscConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl TscParams {
    pub fn zeros(config: TscConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = config
            .tensor_specs()
            .into_iter()
            .map(|(n, (r, c))| (n, Tensor::zeros(r, c)))
            .unzip();
        Ok(Self {
            config,
            names,
            tensors,
        })
    }

    /// Random initialisation: weight matrices `N(0, 1/fan_in)`, position and
    /// time tables `N(0, 0.1^2)`, biases zero.
    pub fn init(config: TscConfig, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            let sd = if name.ends_with("_b") || name == "time.skip" {
                0.0
            } else if name.ends_with(".pos") || name.starts_with("time.") {
                0.1
            } else {
                1.0 / (t.rows() as f64).sqrt()
            };
            if name == "time.gain" {
                t.data_mut().fill(1.0);
            } else if sd > 0.0 {
                for x in t.data_mut() {
                    *x = sd * rng.normal();
                }
            }
        }
        Ok(p)
    }

    /// Like [`TscParams::init`], with the skip and gain tables preconditioned
    /// for `sched` assuming per-component data variance [`DATA_VAR`].
    pub fn init_for_schedule(
        config: TscConfig,
        sched: &NoiseSchedule,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if sched.steps() != config.steps {
            return Err(AidError::config(format!(
                "schedule has {} steps, model {}",
                sched.steps(),
                config.steps
            )));
        }
        let mut p = Self::init(config, rng)?;
        // linear-MMSE preconditioning: skip is the Gaussian-prior denoiser,
        // gain its residual standard deviation, which stays below one
        let coeffs = |t: usize| {
            let ab = sched.alpha_bar(t);
            let total = ab * DATA_VAR + 1.0 - ab;
            ((1.0 - ab).sqrt() / total, (ab * DATA_VAR / total).sqrt())
        };
        let skip = p.get_mut("time.skip").expect("skip table");
        let cols = skip.cols();
        for (i, row) in skip.data_mut().chunks_exact_mut(cols).enumerate() {
            row.fill(coeffs(i + 1).0);
        }
        let gain = p.get_mut("time.gain").expect("gain table");
        for (i, row) in gain.data_mut().chunks_exact_mut(cols).enumerate() {
            row.fill(coeffs(i + 1).1);
        }
        Ok(p)
    }

    /// Assembles parameters from tensors in [`TscConfig::tensor_specs`] order.
    pub fn from_tensors(config: TscConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(AidError::dim(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&tensors) {
            if t.shape() != *shape {
                return Err(AidError::dim(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(AidError::numeric(format!("non-finite weights in `{name}`")));
            }
        }
        Ok(Self {
            config,
            names: specs.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &TscConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Gradients with the same layout as [`TscParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    tensors: Vec<Tensor>,
}

impl ParamGradients {
    pub fn zeros_like(params: &TscParams) -> Self {
        Self {
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Wraps tensors laid out like the matching [`TscParams`].
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
}

fn patchify(cfg: &TscConfig, frames: &[&ComplexArray2D]) -> Result<Tensor> {
    let (n, p) = (cfg.image, cfg.patch);
    let gs = n / p;
    let tl = cfg.token_len();
    let mut data = Vec::with_capacity(frames.len() * cfg.grid() * tl);
    for f in frames {
        if f.shape() != (n, n) {
            return Err(AidError::dim(format!(
                "model expects {n}x{n} frames, got {:?}",
                f.shape()
            )));
        }
        for gr in 0..gs {
            for gc in 0..gs {
                for i in 0..p {
                    for j in 0..p {
                        let z = f.get(gr * p + i, gc * p + j);
                        data.push(z.re);
                        data.push(z.im);
                    }
                }
            }
        }
    }
    Tensor::from_vec(frames.len() * cfg.grid(), tl, data)
}

fn unpatchify(cfg: &TscConfig, tokens: &Tensor, frame: usize) -> ComplexArray2D {
    let (n, p) = (cfg.image, cfg.patch);
    let gs = n / p;
    let g_total = cfg.grid();
    ComplexArray2D::from_fn(n, n, |r, c| {
        let g = (r / p) * gs + c / p;
        let k = 2 * ((r % p) * p + c % p);
        let row = tokens.row(frame * g_total + g);
        Complex64::new(row[k], row[k + 1])
    })
}

struct Graph {
    tape: Tape,
    params: Vec<Var>,
    out: Var,
}

/// Records the forward pass for `queries` against `cond` on a fresh tape.
fn build_graph(
    params: &TscParams,
    cond: &[ComplexArray2D],
    queries: &[EpsQuery<'_>],
) -> Result<Graph> {
    let cfg = &params.config;
    let g_total = cfg.grid();
    let mut tape = Tape::new();
    let vars = params
        .names
        .iter()
        .zip(&params.tensors)
        .map(|(n, t)| tape.leaf(n.clone(), t.clone()))
        .collect::<Result<Vec<Var>>>()?;
    let p = |name: &str| vars[params.index_of(name).expect("parameter present")];
    for q in queries {
        if q.t == 0 || q.t > cfg.steps {
            return Err(AidError::arg(format!(
                "step {} outside 1..={}",
                q.t, cfg.steps
            )));
        }
    }

    let grid_idx = |frames: usize| -> Vec<usize> { (0..frames).flat_map(|_| 0..g_total).collect() };

    let cond_feat = if cfg.conditional {
        let f = queries.iter().map(|q| q.n_cond).max().unwrap_or(0);
        if let Some(q) = queries.iter().find(|q| q.n_cond == 0) {
            return Err(AidError::arg(format!(
                "conditional model needs at least one conditioning frame (query at t={})",
                q.t
            )));
        }
        if f > cfg.window {
            return Err(AidError::config(format!(
                "{f} conditioning frames exceed the model window {}",
                cfg.window
            )));
        }
        if f > cond.len() {
            return Err(AidError::arg(format!(
                "query needs {f} conditioning frames, {} given",
                cond.len()
            )));
        }
        if f == 0 {
            None
        } else {
            let frames: Vec<&ComplexArray2D> = cond[..f].iter().collect();
            let xc = tape.leaf("input.cond", patchify(cfg, &frames)?)?;
            let e = tape.matmul(xc, p("cond.embed"), "cond.embed.out")?;
            let fidx = (0..f)
                .flat_map(|i| std::iter::repeat_n(i, g_total))
                .collect();
            let pf = tape.gather(p("cond.pos"), fidx, "cond.pos.rows")?;
            let pg = tape.gather(p("grid.pos"), grid_idx(f), "cond.grid.rows")?;
            let mut h = tape.add(e, pf, "cond.h_in")?;
            h = tape.add(h, pg, "cond.h0")?;
            for l in 0..cfg.layers {
                let pre = format!("layer{l}");
                let a = tape.layer_norm(h, format!("{pre}.ln1"))?;
                let q = tape.matmul(a, p(&format!("{pre}.wq")), format!("{pre}.q"))?;
                let k = tape.matmul(a, p(&format!("{pre}.wk")), format!("{pre}.k"))?;
                let v = tape.matmul(a, p(&format!("{pre}.wv")), format!("{pre}.v"))?;
                let att = tape.causal_attention(q, k, v, f, g_total, format!("{pre}.attn"))?;
                let o = tape.matmul(att, p(&format!("{pre}.wo")), format!("{pre}.attn_out"))?;
                h = tape.add(h, o, format!("{pre}.res1"))?;
                let b = tape.layer_norm(h, format!("{pre}.ln2"))?;
                let u = tape.matmul(b, p(&format!("{pre}.ff1")), format!("{pre}.ff1.out"))?;
                let u = tape.add_row(u, p(&format!("{pre}.ff1_b")), format!("{pre}.ff1.pre"))?;
                let u = tape.tanh(u, format!("{pre}.ff1.act"))?;
                let u = tape.matmul(u, p(&format!("{pre}.ff2")), format!("{pre}.ff2.out"))?;
                h = tape.add(h, u, format!("{pre}.res2"))?;
            }
            let idx = queries
                .iter()
                .flat_map(|q| (0..g_total).map(move |g| (q.n_cond - 1) * g_total + g))
                .collect();
            let c = tape.gather(h, idx, "cond.select")?;
            Some(tape.matmul(c, p("cond.proj"), "cond.proj.out")?)
        }
    } else {
        None
    };

    let targets: Vec<&ComplexArray2D> = queries.iter().map(|q| q.xt).collect();
    let xq = tape.leaf("input.target", patchify(cfg, &targets)?)?;
    let mut z = tape.matmul(xq, p("target.embed"), "target.embed.out")?;
    let pg = tape.gather(p("grid.pos"), grid_idx(queries.len()), "target.grid.rows")?;
    z = tape.add(z, pg, "target.z0")?;
    if let Some(c) = cond_feat {
        z = tape.add(z, c, "target.cond")?;
    }
    let tidx: Vec<usize> = queries
        .iter()
        .flat_map(|q| std::iter::repeat_n(q.t - 1, g_total))
        .collect();
    let s = tape.gather(p("time.scale"), tidx.clone(), "time.scale.rows")?;
    let sh = tape.gather(p("time.shift"), tidx.clone(), "time.shift.rows")?;
    let zs = tape.mul(z, s, "time.scaled")?;
    z = tape.add(z, zs, "time.mod")?;
    z = tape.add(z, sh, "time.z")?;
    let u = tape.matmul(z, p("head.ff1"), "head.ff1.out")?;
    let u = tape.add_row(u, p("head.ff1_b"), "head.ff1.pre")?;
    let u = tape.tanh(u, "head.ff1.act")?;
    let u = tape.matmul(u, p("head.ff2"), "head.ff2.out")?;
    let u = tape.add(z, u, "head.res")?;
    let out = tape.matmul(u, p("head.out"), "head.out.tokens")?;
    let gain = tape.gather(p("time.gain"), tidx.clone(), "time.gain.rows")?;
    let out = tape.mul(out, gain, "head.gained")?;
    let k = tape.gather(p("time.skip"), tidx, "time.skip.rows")?;
    let skip = tape.mul(xq, k, "skip")?;
    let out = tape.add(out, skip, "eps.tokens")?;
    Ok(Graph {
        tape,
        params: vars,
        out,
    })
}

fn predict(
    params: &TscParams,
    cond: &[ComplexArray2D],
    queries: &[EpsQuery<'_>],
) -> Result<Vec<ComplexArray2D>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let g = build_graph(params, cond, queries)?;
    let out = g.tape.value(g.out);
    Ok((0..queries.len())
        .map(|i| unpatchify(&params.config, out, i))
        .collect())
}

/// Noise prediction for one noisy frame given its conditioning context.
/// The newest `window` frames of `ctx` are used.
pub fn tsc_forward(
    params: &TscParams,
    xt: &ComplexArray2D,
    t: usize,
    ctx: &DenoiserContext,
) -> Result<ComplexArray2D> {
    super::predict_eps(&TscNet::from_ref(params), xt, t, ctx)
}

/// [`TscParams`] as a [`Denoiser`].
#[derive(Clone, Debug)]
pub struct TscNet<P = TscParams> {
    params: P,
}

impl TscNet<TscParams> {
    pub fn new(params: TscParams) -> Self {
        Self { params }
    }

    pub fn into_params(self) -> TscParams {
        self.params
    }
}

impl<'a> TscNet<&'a TscParams> {
    pub fn from_ref(params: &'a TscParams) -> Self {
        Self { params }
    }
}

impl<P: std::borrow::Borrow<TscParams>> TscNet<P> {
    pub fn params(&self) -> &TscParams {
        self.params.borrow()
    }
}

impl<P: std::borrow::Borrow<TscParams> + Send + Sync> Denoiser for TscNet<P> {
    fn predict_batch(
        &self,
        cond: &[ComplexArray2D],
        queries: &[EpsQuery<'_>],
    ) -> Result<Vec<ComplexArray2D>> {
        predict(self.params(), cond, queries)
    }

    fn max_context(&self) -> Option<usize> {
        let cfg = self.params().config();
        Some(if cfg.conditional { cfg.window } else { 0 })
    }

    fn num_steps(&self) -> Option<usize> {
        Some(self.params().config().steps)
    }
}

fn sequence_gradient(
    params: &TscParams,
    seq: &ImageSequence,
    draws: &[LossDraw],
    sched: &NoiseSchedule,
) -> Result<(f64, ParamGradients)> {
    let cfg = &params.config;
    if cfg.conditional && seq.len() - 1 > cfg.window {
        return Err(AidError::config(format!(
            "training sequences of {} frames exceed window {} + 1",
            seq.len(),
            cfg.window
        )));
    }
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
    let g = build_graph(params, cond, &queries)?;
    let out = g.tape.value(g.out);
    let preds: Vec<ComplexArray2D> = (0..queries.len())
        .map(|i| unpatchify(cfg, out, i))
        .collect();
    let loss = loss_terms(&preds, draws)?.total;

    let eps: Vec<&ComplexArray2D> = draws.iter().map(|d| &d.eps).collect();
    let target = patchify(cfg, &eps)?;
    let seed = Tensor::from_vec(
        out.rows(),
        out.cols(),
        out.data()
            .iter()
            .zip(target.data())
            .map(|(o, e)| 2.0 * (o - e))
            .collect(),
    )?;
    let mut adj = g.tape.backward(g.out, seed)?;
    let mut grads = ParamGradients::zeros_like(params);
    for (slot, var) in grads.tensors.iter_mut().zip(&g.params) {
        if let Some(t) = adj[var.index()].take() {
            if !t.is_finite() {
                return Err(AidError::numeric(format!(
                    "non-finite gradient for `{}`",
                    g.tape.name(*var)
                )));
            }
            *slot = t;
        }
    }
    Ok((loss, grads))
}

/// Loss and exact parameter gradients for explicit per-sequence draws.
/// Sequences are processed in parallel and summed in batch order.
pub fn grad_params_with_draws(
    params: &TscParams,
    batch: &[ImageSequence],
    draws: &[Vec<LossDraw>],
    sched: &NoiseSchedule,
) -> Result<(f64, ParamGradients)> {
    if batch.is_empty() {
        return Err(AidError::arg("empty training batch"));
    }
    if draws.len() != batch.len() {
        return Err(AidError::arg("one set of draws per sequence required"));
    }
    if sched.steps() != params.config.steps {
        return Err(AidError::config(format!(
            "schedule has {} steps, model {}",
            sched.steps(),
            params.config.steps
        )));
    }
    let parts = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(seq, d)| sequence_gradient(params, seq, d, sched))
        .collect::<Vec<Result<(f64, ParamGradients)>>>();
    let mut loss = 0.0;
    let mut grads = ParamGradients::zeros_like(params);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Draws `(t, eps)` for every sequence in order, then evaluates
/// [`grad_params_with_draws`].
pub fn grad_params(
    params: &TscParams,
    batch: &[ImageSequence],
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(f64, ParamGradients)> {
    let draws = batch
        .iter()
        .map(|s| draw_loss_noise(s, sched, rng))
        .collect::<Result<Vec<_>>>()?;
    grad_params_with_draws(params, batch, &draws, sched)
}
