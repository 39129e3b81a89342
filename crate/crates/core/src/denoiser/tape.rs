//! A small reverse-mode differentiator over dense `f64` matrices.
//!
//! Nodes are appended to a [`Tape`] in evaluation order; [`Tape::backward`]
//! walks them in reverse and accumulates adjoints. The operation set is
//! exactly what the denoising network needs: matrix product, elementwise
//! add/multiply, row broadcast, tanh, row layer norm, row gather and grouped
//! causal attention. Every forward result is checked for finiteness and
//! failures name the offending node.

use crate::error::{AidError, Result};

/// Row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(AidError::dim(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self * other`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`
    fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows);
        let mut out = Tensor::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = other.row(r);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`
    fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(arow, other.row(j));
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape, also the index into [`Tape::backward`]'s result.
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Gather { src: usize, idx: Vec<usize> },
    Attention(Box<AttentionCache>),
}

struct AttentionCache {
    q: usize,
    k: usize,
    v: usize,
    frames: usize,
    groups: usize,
    // probs[(g * frames + i) * frames + j], zero for j > i
    probs: Vec<f64>,
}

struct Node {
    name: String,
    value: Tensor,
    op: Op,
}

/// Evaluation record for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn name(&self, v: Var) -> &str {
        &self.nodes[v.0].name
    }

    fn push(&mut self, name: String, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AidError::numeric(format!("non-finite values in `{name}`")));
        }
        self.nodes.push(Node { name, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input or parameter.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        self.push(name.into(), value, Op::Leaf)
    }

    fn shape_err(&self, what: &str, a: Var, b: Var) -> AidError {
        AidError::dim(format!(
            "{what}: `{}` {:?} vs `{}` {:?}",
            self.name(a),
            self.value(a).shape(),
            self.name(b),
            self.value(b).shape()
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var, name: impl Into<String>) -> Result<Var> {
        if self.value(a).cols != self.value(b).rows {
            return Err(self.shape_err("matmul", a, b));
        }
        let value = self.value(a).matmul(self.value(b));
        self.push(name.into(), value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var, name: impl Into<String>) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(name.into(), value, Op::Add(a.0, b.0))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var, name: impl Into<String>) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut value = ta.clone();
        for chunk in value.data.chunks_exact_mut(tr.cols) {
            for (x, b) in chunk.iter_mut().zip(&tr.data) {
                *x += b;
            }
        }
        self.push(name.into(), value, Op::AddRow(a.0, row.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var, name: impl Into<String>) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
        };
        self.push(name.into(), value, Op::Mul(a.0, b.0))
    }

    pub fn tanh(&mut self, a: Var, name: impl Into<String>) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor {
            rows: ta.rows,
            cols: ta.cols,
            data: ta.data.iter().map(|x| x.tanh()).collect(),
        };
        self.push(name.into(), value, Op::Tanh(a.0))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, name: impl Into<String>) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols;
        let mut value = ta.clone();
        let mut rstd = Vec::with_capacity(ta.rows);
        for row in value.data.chunks_exact_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        self.push(name.into(), value, Op::LayerNorm { x: a.0, rstd })
    }

    /// Row `i` of the result is row `idx[i]` of `src`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, name: impl Into<String>) -> Result<Var> {
        let ts = self.value(src);
        let name = name.into();
        if let Some(&bad) = idx.iter().find(|&&i| i >= ts.rows) {
            return Err(AidError::dim(format!(
                "gather `{name}`: row {bad} out of {} rows of `{}`",
                ts.rows,
                self.name(src)
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * ts.cols);
        for &i in &idx {
            data.extend_from_slice(ts.row(i));
        }
        let value = Tensor {
            rows: idx.len(),
            cols: ts.cols,
            data,
        };
        self.push(name, value, Op::Gather { src: src.0, idx })
    }

    /// Causal softmax attention across `frames` positions, independently for
    /// each of `groups` token streams. Rows are ordered frame-major
    /// (`row = frame * groups + group`); position `i` attends to `j <= i`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        frames: usize,
        groups: usize,
        name: impl Into<String>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rows != frames * groups {
            return Err(AidError::dim(format!(
                "attention shapes q {:?} k {:?} v {:?} for {frames} frames x {groups} groups",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        let (value, probs) = attention_forward(tq, tk, tv, frames, groups)?;
        let cache = AttentionCache {
            q: q.0,
            k: k.0,
            v: v.0,
            frames,
            groups,
            probs,
        };
        self.push(name.into(), value, Op::Attention(Box::new(cache)))
    }

    /// Reverse sweep from `out` seeded with `seed` (same shape as `out`).
    /// Returns the adjoint of every node (`None` where none flowed).
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Vec<Option<Tensor>>> {
        if seed.shape() != self.value(out).shape() {
            return Err(AidError::dim("backward seed shape mismatch"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&self.nodes[*b].value);
                    let gb = self.nodes[*a].value.t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for chunk in g.data.chunks_exact(g.cols) {
                        for (acc, x) in gr.data.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
                    };
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(d, y)| d * (1.0 - y * y))
                            .collect(),
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, rstd } => {
                    let y = &node.value;
                    let cols = y.cols;
                    let mut gx = Tensor::zeros(y.rows, cols);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dy = g.row(r);
                        let yr = y.row(r);
                        let mean_dy = dy.iter().sum::<f64>() / cols as f64;
                        let mean_dyy = dot(dy, yr) / cols as f64;
                        let out = &mut gx.data[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] = rs * (dy[c] - mean_dy - yr[c] * mean_dyy);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { src, idx } => {
                    let vs = &self.nodes[*src].value;
                    let mut gs = Tensor::zeros(vs.rows, vs.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gs.data[i * vs.cols..(i + 1) * vs.cols];
                        for (d, x) in dst.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::Attention(cache) => {
                    let (gq, gk, gv) = attention_backward(
                        &self.nodes[cache.q].value,
                        &self.nodes[cache.k].value,
                        &self.nodes[cache.v].value,
                        &g,
                        cache,
                    );
                    accumulate(&mut grads, cache.q, gq);
                    accumulate(&mut grads, cache.k, gk);
                    accumulate(&mut grads, cache.v, gv);
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    frames: usize,
    groups: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let d = q.cols;
    if d == 0 {
        return Err(AidError::arg("attention width must be positive"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Tensor::zeros(q.rows, d);
    let mut probs = vec![0.0; groups * frames * frames];
    let mut logits = vec![0.0; frames];
    for g in 0..groups {
        for i in 0..frames {
            let qi = q.row(i * groups + g);
            let mut max = f64::NEG_INFINITY;
            for (j, l) in logits.iter_mut().enumerate().take(i + 1) {
                *l = dot(qi, k.row(j * groups + g)) * scale;
                max = max.max(*l);
            }
            let mut total = 0.0;
            for l in logits.iter_mut().take(i + 1) {
                *l = (*l - max).exp();
                total += *l;
            }
            let p = &mut probs[(g * frames + i) * frames..(g * frames + i + 1) * frames];
            let orow = &mut out.data[(i * groups + g) * d..(i * groups + g + 1) * d];
            for j in 0..=i {
                p[j] = logits[j] / total;
                for (o, x) in orow.iter_mut().zip(v.row(j * groups + g)) {
                    *o += p[j] * x;
                }
            }
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gout: &Tensor,
    cache: &AttentionCache,
) -> (Tensor, Tensor, Tensor) {
    let (frames, groups) = (cache.frames, cache.groups);
    let d = q.cols;
    let scale = 1.0 / (d as f64).sqrt();
    let mut gq = Tensor::zeros(q.rows, d);
    let mut gk = Tensor::zeros(k.rows, d);
    let mut gv = Tensor::zeros(v.rows, d);
    let mut dp = vec![0.0; frames];
    for g in 0..groups {
        for i in 0..frames {
            let ri = i * groups + g;
            let p = &cache.probs[(g * frames + i) * frames..(g * frames + i + 1) * frames];
            let go = gout.row(ri);
            let mut weighted = 0.0;
            for j in 0..=i {
                dp[j] = dot(go, v.row(j * groups + g));
                weighted += p[j] * dp[j];
            }
            for j in 0..=i {
                let rj = j * groups + g;
                let ds = p[j] * (dp[j] - weighted) * scale;
                {
                    let gvr = &mut gv.data[rj * d..(rj + 1) * d];
                    for (a, x) in gvr.iter_mut().zip(go) {
                        *a += p[j] * x;
                    }
                }
                if ds != 0.0 {
                    let kr = k.row(rj);
                    let gqr = &mut gq.data[ri * d..(ri + 1) * d];
                    for (a, x) in gqr.iter_mut().zip(kr) {
                        *a += ds * x;
                    }
                    let qr = q.row(ri);
                    let gkr = &mut gk.data[rj * d..(rj + 1) * d];
                    for (a, x) in gkr.iter_mut().zip(qr) {
                        *a += ds * x;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Single-stream causal attention `softmax(q k^T / sqrt(d) + M) v`, where `M`
/// is `-inf` above the diagonal.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.cols == 0 {
        return Err(AidError::arg("attention width must be positive"));
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(AidError::dim(format!(
            "attention shapes q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(attention_forward(q, k, v, q.rows, 1)?.0)
}
