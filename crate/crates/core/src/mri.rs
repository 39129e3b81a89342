//! Cartesian multi-coil measurement model `A = P F S`.
//!
//! `S` multiplies the image by each coil sensitivity map, `F` is the unitary
//! 2-D DFT and `P` keeps whole k-space rows (phase-encode lines). The adjoint
//! and the likelihood gradient used by the data-fidelity update live here too.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::numerics::{fft2, ifft2, ComplexArray2D, RngStream};

/// Sampling pattern family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    RandomAcs,
    RandomNoacs,
    EquispacedAcs,
    EquispacedNoacs,
    OddLines,
    Full,
}

impl MaskKind {
    pub const ALL: [MaskKind; 6] = [
        MaskKind::RandomAcs,
        MaskKind::RandomNoacs,
        MaskKind::EquispacedAcs,
        MaskKind::EquispacedNoacs,
        MaskKind::OddLines,
        MaskKind::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::RandomAcs => "random-acs",
            MaskKind::RandomNoacs => "random-noacs",
            MaskKind::EquispacedAcs => "equispaced-acs",
            MaskKind::EquispacedNoacs => "equispaced-noacs",
            MaskKind::OddLines => "odd-lines",
            MaskKind::Full => "full",
        }
    }

    pub fn has_acs(self) -> bool {
        matches!(self, MaskKind::RandomAcs | MaskKind::EquispacedAcs)
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = AidError;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AidError::arg(format!("unknown mask kind `{s}`")))
    }
}

/// ACS width used when none is given: 16 lines at n = 320, scaled with n.
pub fn default_acs_width(n: usize) -> usize {
    ((16 * n) as f64 / 320.0).round().max(2.0) as usize
}

/// Row-wise k-space sampling mask. Frequency origin is row 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    rows: usize,
    cols: usize,
    kind: MaskKind,
    lines: Vec<bool>,
    acs: Vec<bool>,
}

impl SamplingMask {
    /// Mask from explicit kept rows; `kind` is informational.
    pub fn from_lines(kind: MaskKind, cols: usize, lines: Vec<bool>) -> Result<Self> {
        if lines.is_empty() || cols == 0 {
            return Err(AidError::dim("empty mask"));
        }
        let rows = lines.len();
        Ok(Self {
            rows,
            cols,
            kind,
            acs: vec![false; rows],
            lines,
        })
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

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn is_kept(&self, row: usize, _col: usize) -> bool {
        self.lines[row]
    }

    /// Rows belonging to the autocalibration band.
    pub fn acs_lines(&self) -> &[bool] {
        &self.acs
    }

    pub fn kept_count(&self) -> usize {
        self.lines.iter().filter(|&&k| k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.rows as f64
    }

    /// Fraction of rows kept outside the ACS band.
    pub fn kept_fraction_excluding_acs(&self) -> f64 {
        let n = self
            .lines
            .iter()
            .zip(&self.acs)
            .filter(|(&k, &a)| k && !a)
            .count();
        n as f64 / self.rows as f64
    }

    /// Binary matrix view (1 = sampled), row-major.
    pub fn to_matrix(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for &keep in &self.lines {
            out.extend(std::iter::repeat_n(u8::from(keep), self.cols));
        }
        out
    }

    /// Rebuilds a mask from a row-major binary matrix with whole rows kept or
    /// dropped.
    pub fn from_matrix(kind: MaskKind, rows: usize, cols: usize, bits: &[u8]) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(AidError::dim("mask matrix length mismatch"));
        }
        let mut lines = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &bits[r * cols..(r + 1) * cols];
            if row.iter().any(|&b| b > 1) {
                return Err(AidError::arg("mask entries must be 0 or 1"));
            }
            let keep = row[0] == 1;
            if row.iter().any(|&b| (b == 1) != keep) {
                return Err(AidError::arg(format!("mask row {r} is not line-wise")));
            }
            lines.push(keep);
        }
        Self::from_lines(kind, cols, lines)
    }

    /// Zeroes unsampled rows.
    pub fn apply(&self, k: &ComplexArray2D) -> Result<ComplexArray2D> {
        if k.shape() != self.shape() {
            return Err(AidError::dim(format!(
                "mask {}x{} vs array {}x{}",
                self.rows,
                self.cols,
                k.rows(),
                k.cols()
            )));
        }
        let mut out = k.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(self.cols).enumerate() {
            if !self.lines[r] {
                row.fill(Complex64::new(0.0, 0.0));
            }
        }
        Ok(out)
    }
}

/// Builds a line mask of the requested kind.
///
/// Equispaced kinds keep rows `r` with `r % round(factor) == 0`; random kinds
/// draw `round(n / factor)` rows without replacement from the rows outside
/// the ACS band. The ACS band is `acs_width` contiguous rows centred on DC in
/// the fftshifted view, which wraps around row 0 in storage order.
pub fn make_mask(
    kind: MaskKind,
    n: usize,
    factor: f64,
    acs_width: usize,
    rng: &mut RngStream,
) -> Result<SamplingMask> {
    if n == 0 {
        return Err(AidError::arg("mask size must be positive"));
    }
    if !factor.is_finite() || factor < 1.0 {
        return Err(AidError::arg(format!("undersampling factor {factor} < 1")));
    }
    if factor > n as f64 {
        return Err(AidError::arg(format!(
            "undersampling factor {factor} exceeds line count {n}"
        )));
    }
    if kind.has_acs() && acs_width >= n {
        return Err(AidError::arg(format!(
            "ACS width {acs_width} must be smaller than {n}"
        )));
    }

    let mut lines = vec![false; n];
    let mut acs = vec![false; n];
    if kind.has_acs() {
        let start = n / 2 - acs_width / 2;
        for s in start..start + acs_width {
            // shifted index s -> storage index
            let r = (s + n - n / 2) % n;
            acs[r] = true;
            lines[r] = true;
        }
    }

    match kind {
        MaskKind::Full => lines.fill(true),
        MaskKind::OddLines => {
            for (r, keep) in lines.iter_mut().enumerate() {
                *keep = r % 2 == 0;
            }
        }
        MaskKind::EquispacedAcs | MaskKind::EquispacedNoacs => {
            let step = (factor.round() as usize).max(1);
            for (r, keep) in lines.iter_mut().enumerate() {
                if r % step == 0 {
                    *keep = true;
                }
            }
        }
        MaskKind::RandomAcs | MaskKind::RandomNoacs => {
            let candidates: Vec<usize> = (0..n).filter(|&r| !acs[r]).collect();
            let target = ((n as f64 / factor).round() as usize).min(candidates.len());
            for i in sample(rng, candidates.len(), target).into_vec() {
                lines[candidates[i]] = true;
            }
        }
    }

    Ok(SamplingMask {
        rows: n,
        cols: n,
        kind,
        lines,
        acs,
    })
}

/// Per-coil complex sensitivity maps, normalised to unit sum of squares.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities {
    maps: Vec<ComplexArray2D>,
}

/// Upper bound on the largest neighbouring-pixel difference of a synthetic
/// coil map of side `n`.
pub fn coil_smoothness_bound(n: usize) -> f64 {
    12.0 / n as f64
}

impl CoilSensitivities {
    /// Wraps maps after checking that their shapes agree.
    pub fn new(maps: Vec<ComplexArray2D>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| AidError::arg("at least one coil map required"))?;
        for m in &maps[1..] {
            first.check_same_shape(m)?;
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[ComplexArray2D] {
        &self.maps
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    /// Single coil with unit sensitivity everywhere.
    pub fn unit(rows: usize, cols: usize) -> Self {
        Self {
            maps: vec![ComplexArray2D::from_fn(rows, cols, |_, _| {
                Complex64::new(1.0, 0.0)
            })],
        }
    }

    /// Largest pixelwise deviation of the sum of squared magnitudes from 1.
    pub fn sos_deviation(&self) -> f64 {
        let len = self.maps[0].len();
        (0..len)
            .map(|i| {
                let s: f64 = self.maps.iter().map(|m| m.data()[i].norm_sqr()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest absolute difference between horizontally or vertically
    /// adjacent pixels over all maps.
    pub fn max_gradient(&self) -> f64 {
        let mut g: f64 = 0.0;
        for m in &self.maps {
            let (rows, cols) = m.shape();
            for r in 0..rows {
                for c in 0..cols {
                    if r + 1 < rows {
                        g = g.max((m.get(r + 1, c) - m.get(r, c)).norm());
                    }
                    if c + 1 < cols {
                        g = g.max((m.get(r, c + 1) - m.get(r, c)).norm());
                    }
                }
            }
        }
        g
    }
}

/// Synthetic smooth coil profiles: complex Gaussian bumps centred at distinct
/// positions around the border, with a gentle linear phase, normalised to
/// unit sum of squares per pixel. A single coil is the unit map.
pub fn synth_coils(n: usize, n_coils: usize, rng: &mut RngStream) -> Result<CoilSensitivities> {
    if n_coils == 0 {
        return Err(AidError::arg("coil count must be at least 1"));
    }
    if n == 0 {
        return Err(AidError::arg("image size must be positive"));
    }
    if n_coils == 1 {
        return Ok(CoilSensitivities::unit(n, n));
    }
    let nf = n as f64;
    let centre = (nf - 1.0) / 2.0;
    let mut raw = Vec::with_capacity(n_coils);
    for c in 0..n_coils {
        let angle = 2.0 * PI * (c as f64 + rng.uniform_range(-0.2, 0.2)) / n_coils as f64;
        let radius = 0.6 * nf;
        let (cy, cx) = (centre + radius * angle.sin(), centre + radius * angle.cos());
        let width = nf * rng.uniform_range(0.45, 0.6);
        let (py, px) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
        let phase0 = rng.uniform_range(0.0, 2.0 * PI);
        raw.push(ComplexArray2D::from_fn(n, n, |r, col| {
            let dy = r as f64 - cy;
            let dx = col as f64 - cx;
            let mag = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
            let phase = phase0 + PI * (py * r as f64 + px * col as f64) / nf;
            Complex64::from_polar(mag, phase)
        }));
    }
    let mut rss = vec![0.0; n * n];
    for m in &raw {
        for (acc, z) in rss.iter_mut().zip(m.data()) {
            *acc += z.norm_sqr();
        }
    }
    let maps = raw
        .into_iter()
        .map(|m| {
            let data = m
                .data()
                .iter()
                .zip(&rss)
                .map(|(z, s)| z / s.sqrt())
                .collect();
            ComplexArray2D::new(n, n, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoilSensitivities { maps })
}

/// Measurement operator and noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardModel {
    mask: SamplingMask,
    coils: CoilSensitivities,
    sigma_eta: f64,
}

impl ForwardModel {
    pub fn new(mask: SamplingMask, coils: CoilSensitivities, sigma_eta: f64) -> Result<Self> {
        if mask.shape() != coils.shape() {
            return Err(AidError::dim(format!(
                "mask {:?} and coil maps {:?} disagree",
                mask.shape(),
                coils.shape()
            )));
        }
        if !(sigma_eta > 0.0 && sigma_eta.is_finite()) {
            return Err(AidError::arg(format!(
                "sigma_eta must be positive, got {sigma_eta}"
            )));
        }
        Ok(Self {
            mask,
            coils,
            sigma_eta,
        })
    }

    /// Fully sampled single unit coil, `sigma_eta = 1`.
    pub fn identity(n: usize) -> Self {
        Self {
            mask: SamplingMask::from_lines(MaskKind::Full, n, vec![true; n]).unwrap(),
            coils: CoilSensitivities::unit(n, n),
            sigma_eta: 1.0,
        }
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn coils(&self) -> &CoilSensitivities {
        &self.coils
    }

    pub fn sigma_eta(&self) -> f64 {
        self.sigma_eta
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn with_sigma_eta(&self, sigma_eta: f64) -> Result<Self> {
        Self::new(self.mask.clone(), self.coils.clone(), sigma_eta)
    }
}

/// Multi-coil k-space samples, zero at every unsampled location.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceFrame {
    coils: Vec<ComplexArray2D>,
}

impl KSpaceFrame {
    /// Validates shapes against `model` and that unsampled rows are zero.
    pub fn new(coils: Vec<ComplexArray2D>, model: &ForwardModel) -> Result<Self> {
        let frame = Self { coils };
        frame.check(model)?;
        Ok(frame)
    }

    pub fn coils(&self) -> &[ComplexArray2D] {
        &self.coils
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn check(&self, model: &ForwardModel) -> Result<()> {
        if self.coils.len() != model.coils.n_coils() {
            return Err(AidError::dim(format!(
                "k-space has {} coils, model has {}",
                self.coils.len(),
                model.coils.n_coils()
            )));
        }
        for (c, k) in self.coils.iter().enumerate() {
            if k.shape() != model.shape() {
                return Err(AidError::dim(format!("coil {c} k-space shape mismatch")));
            }
            let cols = k.cols();
            for (r, row) in k.data().chunks_exact(cols).enumerate() {
                if !model.mask.lines[r] && row.iter().any(|z| z.norm_sqr() != 0.0) {
                    return Err(AidError::arg(format!(
                        "coil {c} has data on unsampled row {r}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.coils.iter().map(|k| k.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `sum_c <self_c, other_c>`
    pub fn inner(&self, other: &KSpaceFrame) -> Result<Complex64> {
        if self.coils.len() != other.coils.len() {
            return Err(AidError::dim("coil count mismatch"));
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, b) in self.coils.iter().zip(&other.coils) {
            acc += crate::numerics::inner(a, b)?;
        }
        Ok(acc)
    }

    /// Adds circularly-symmetric complex noise with per-entry
    /// `E|n|^2 = sigma^2` on sampled rows only.
    pub fn add_noise(&mut self, model: &ForwardModel, sigma: f64, rng: &mut RngStream) {
        if sigma == 0.0 {
            return;
        }
        let s = sigma / std::f64::consts::SQRT_2;
        for k in &mut self.coils {
            let cols = k.cols();
            for (r, row) in k.data_mut().chunks_exact_mut(cols).enumerate() {
                if model.mask.lines[r] {
                    for z in row {
                        *z += rng.complex_normal() * s;
                    }
                }
            }
        }
    }
}

/// `y_c = P F (S_c x)` for every coil.
pub fn apply_forward(model: &ForwardModel, x: &ComplexArray2D) -> Result<KSpaceFrame> {
    if x.shape() != model.shape() {
        return Err(AidError::dim(format!(
            "image {:?} vs operator {:?}",
            x.shape(),
            model.shape()
        )));
    }
    let coils = model
        .coils
        .maps
        .iter()
        .map(|s| {
            let weighted = s.zip_map(x, |a, b| a * b)?;
            model.mask.apply(&fft2(&weighted)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KSpaceFrame { coils })
}

/// `A^H y = sum_c conj(S_c) F^H (P y_c)`.
pub fn apply_adjoint(model: &ForwardModel, y: &KSpaceFrame) -> Result<ComplexArray2D> {
    if y.coils.len() != model.coils.n_coils() {
        return Err(AidError::dim(format!(
            "k-space has {} coils, model has {}",
            y.coils.len(),
            model.coils.n_coils()
        )));
    }
    let (rows, cols) = model.shape();
    let mut out = ComplexArray2D::zeros(rows, cols);
    for (s, k) in model.coils.maps.iter().zip(&y.coils) {
        let img = ifft2(&model.mask.apply(k)?)?;
        for ((o, sv), v) in out.data_mut().iter_mut().zip(s.data()).zip(img.data()) {
            *o += sv.conj() * v;
        }
    }
    Ok(out)
}

/// Data-fidelity ascent direction `A^H (y - A x) / sigma_eta^2`.
///
/// This is the conjugate (Wirtinger) gradient of `-||(y - A x) / sigma_eta||^2`;
/// with real and imaginary parts taken as separate real coordinates the
/// gradient of that exponent is twice this value.
pub fn likelihood_grad(
    model: &ForwardModel,
    y: &KSpaceFrame,
    x: &ComplexArray2D,
) -> Result<ComplexArray2D> {
    if model.sigma_eta.is_nan() || model.sigma_eta <= 0.0 {
        return Err(AidError::arg("sigma_eta must be positive"));
    }
    let ax = apply_forward(model, x)?;
    if y.coils.len() != ax.coils.len() {
        return Err(AidError::dim("k-space coil count mismatch"));
    }
    let residual = KSpaceFrame {
        coils: y
            .coils
            .iter()
            .zip(&ax.coils)
            .map(|(a, b)| a.zip_map(b, |u, v| u - v))
            .collect::<Result<Vec<_>>>()?,
    };
    let g = apply_adjoint(model, &residual)?;
    Ok(g.scale(1.0 / (model.sigma_eta * model.sigma_eta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::inner;

    fn model(kind: MaskKind, n: usize, coils: usize, seed: u64) -> ForwardModel {
        let mut rng = RngStream::new(seed, 0);
        let mask = make_mask(kind, n, 4.0, default_acs_width(n).min(n / 4), &mut rng).unwrap();
        let coils = synth_coils(n, coils, &mut rng).unwrap();
        ForwardModel::new(mask, coils, 1.0).unwrap()
    }

    #[test]
    fn full_and_odd_line_masks() {
        let mut rng = RngStream::new(0, 0);
        let full = make_mask(MaskKind::Full, 8, 1.0, 0, &mut rng).unwrap();
        assert!(full.lines().iter().all(|&k| k));
        let odd = make_mask(MaskKind::OddLines, 8, 2.0, 0, &mut rng).unwrap();
        let kept: Vec<usize> = (0..8).filter(|&r| odd.lines()[r]).collect();
        assert_eq!(kept, vec![0, 2, 4, 6]);
    }

    #[test]
    fn equispaced_acs_line_count_matches_enumeration() {
        let mut rng = RngStream::new(0, 0);
        let (n, r, w) = (320, 12.0, 16);
        let mask = make_mask(MaskKind::EquispacedAcs, n, r, w, &mut rng).unwrap();
        // oracle: enumerate the union of equispaced rows and the wrapped ACS band
        let mut expected = std::collections::BTreeSet::new();
        for row in (0..n).step_by(12) {
            expected.insert(row);
        }
        for s in (n / 2 - w / 2)..(n / 2 + w / 2) {
            expected.insert((s + n / 2) % n);
        }
        assert_eq!(mask.kept_count(), expected.len());
        let approx = 1.0 / 12.0 + 16.0 / 320.0;
        assert!((mask.kept_fraction() - approx).abs() < 3.0 / 320.0);
        let acs: Vec<usize> = (0..n).filter(|&i| mask.acs_lines()[i]).collect();
        assert_eq!(acs.len(), 16);
        assert!(acs.contains(&0) && acs.contains(&(n - 1)) && acs.contains(&7));
    }

    #[test]
    fn random_masks_hit_target_fraction() {
        for kind in [MaskKind::RandomAcs, MaskKind::RandomNoacs] {
            for seed in 0..10 {
                let mut rng = RngStream::new(seed, 3);
                let n = 64;
                for r in [2.0, 4.0, 8.0, 12.0] {
                    let mask = make_mask(kind, n, r, 4, &mut rng).unwrap();
                    let f = mask.kept_fraction_excluding_acs();
                    assert!(f >= 0.8 / r && f <= 1.25 / r, "{kind} R={r} f={f}");
                }
            }
        }
    }

    #[test]
    fn mask_arguments_are_checked() {
        let mut rng = RngStream::new(0, 0);
        assert!(make_mask(MaskKind::RandomAcs, 16, 17.0, 4, &mut rng).is_err());
        assert!(make_mask(MaskKind::RandomAcs, 16, 0.5, 4, &mut rng).is_err());
        assert!(make_mask(MaskKind::EquispacedAcs, 16, 2.0, 16, &mut rng).is_err());
        assert_eq!("odd-lines".parse::<MaskKind>().unwrap(), MaskKind::OddLines);
        assert!("zigzag".parse::<MaskKind>().is_err());
    }

    #[test]
    fn mask_is_idempotent_and_round_trips_matrix() {
        let mut rng = RngStream::new(4, 0);
        let mask = make_mask(MaskKind::RandomAcs, 16, 4.0, 4, &mut rng).unwrap();
        let k = rng.normal_array(16, 16);
        let once = mask.apply(&k).unwrap();
        assert_eq!(mask.apply(&once).unwrap(), once);
        let back = SamplingMask::from_matrix(mask.kind(), 16, 16, &mask.to_matrix()).unwrap();
        assert_eq!(back.lines(), mask.lines());
    }

    #[test]
    fn coil_normalisation_and_smoothness() {
        let mut rng = RngStream::new(0, 0);
        assert!(synth_coils(8, 0, &mut rng).is_err());
        let single = synth_coils(8, 1, &mut rng).unwrap();
        assert!(single.maps()[0]
            .data()
            .iter()
            .all(|z| (z.norm() - 1.0).abs() < 1e-15));

        let four = synth_coils(64, 4, &mut rng).unwrap();
        assert!(four.sos_deviation() < 1e-10);

        let a = synth_coils(32, 8, &mut RngStream::new(1, 0)).unwrap();
        let b = synth_coils(32, 8, &mut RngStream::new(2, 0)).unwrap();
        assert_ne!(a, b);
        for m in [&a, &b, &four] {
            let n = m.shape().0;
            assert!(
                m.max_gradient() <= coil_smoothness_bound(n),
                "gradient {} > bound {}",
                m.max_gradient(),
                coil_smoothness_bound(n)
            );
        }
    }

    #[test]
    fn full_unit_forward_is_fft() {
        let mut rng = RngStream::new(8, 0);
        let x = rng.normal_array(8, 8);
        let m = ForwardModel::identity(8);
        let y = apply_forward(&m, &x).unwrap();
        assert!(y.coils()[0].max_abs_diff(&fft2(&x).unwrap()) < 1e-15);
        let back = apply_adjoint(&m, &y).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
        let zero = apply_forward(&m, &ComplexArray2D::zeros(8, 8)).unwrap();
        assert_eq!(zero.norm(), 0.0);
        let zimg = apply_adjoint(&m, &zero).unwrap();
        assert_eq!(zimg.norm(), 0.0);
    }

    #[test]
    fn odd_lines_single_coil_folds_half_fov() {
        let mut rng = RngStream::new(2, 0);
        let n = 8;
        let x = rng.normal_array(n, n);
        let mask = make_mask(MaskKind::OddLines, n, 2.0, 0, &mut rng).unwrap();
        let m = ForwardModel::new(mask, CoilSensitivities::unit(n, n), 1.0).unwrap();
        let y = apply_forward(&m, &x).unwrap();
        let folded = ifft2(&y.coils()[0]).unwrap();
        // direct computation: keeping even k-rows averages x with its copy
        // shifted by n/2 rows
        let expected =
            ComplexArray2D::from_fn(n, n, |r, c| (x.get(r, c) + x.get((r + n / 2) % n, c)) * 0.5);
        assert!(folded.max_abs_diff(&expected) < 1e-12);
        // unsampled rows are exactly zero
        for r in (1..n).step_by(2) {
            for c in 0..n {
                assert_eq!(y.coils()[0].get(r, c), Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn adjoint_dot_product_test() {
        for (i, kind) in MaskKind::ALL.into_iter().enumerate() {
            for coils in [1, 4] {
                let m = model(kind, 16, coils, i as u64);
                let mut rng = RngStream::new(100 + i as u64, coils as u64);
                let x = rng.normal_array(16, 16);
                let ax = apply_forward(&m, &x).unwrap();
                let y = apply_forward(&m, &rng.normal_array(16, 16)).unwrap();
                let lhs = ax.inner(&y).unwrap();
                let rhs = inner(&x, &apply_adjoint(&m, &y).unwrap()).unwrap();
                assert!((lhs - rhs).norm() < 1e-12 * ax.norm() * y.norm());
            }
        }
    }

    #[test]
    fn kspace_frame_validation() {
        let m = model(MaskKind::OddLines, 8, 2, 0);
        let bad = vec![ComplexArray2D::from_fn(8, 8, |_, _| Complex64::new(1.0, 0.0)); 2];
        assert!(KSpaceFrame::new(bad, &m).is_err());
        let wrong_count = vec![ComplexArray2D::zeros(8, 8)];
        assert!(KSpaceFrame::new(wrong_count, &m).is_err());
        assert!(apply_forward(&m, &ComplexArray2D::zeros(4, 4)).is_err());
    }

    #[test]
    fn likelihood_grad_properties() {
        let m = model(MaskKind::RandomAcs, 8, 3, 5);
        let mut rng = RngStream::new(6, 0);
        let x = rng.normal_array(8, 8);
        let y = apply_forward(&m, &x).unwrap();
        assert!(likelihood_grad(&m, &y, &x).unwrap().max_abs() < 1e-14);

        let x2 = rng.normal_array(8, 8);
        let g1 = likelihood_grad(&m, &y, &x2).unwrap();
        let half = m.with_sigma_eta(0.5).unwrap();
        let g2 = likelihood_grad(&half, &y, &x2).unwrap();
        assert!(g2.max_abs_diff(&g1.scale(4.0)) < 1e-12 * g2.max_abs());
        assert!(ForwardModel::new(m.mask().clone(), m.coils().clone(), 0.0).is_err());
    }

    #[test]
    fn likelihood_grad_matches_finite_differences() {
        let m = model(MaskKind::EquispacedAcs, 8, 2, 9)
            .with_sigma_eta(0.7)
            .unwrap();
        let mut rng = RngStream::new(10, 0);
        let y = apply_forward(&m, &rng.normal_array(8, 8)).unwrap();
        let x = rng.normal_array(8, 8);
        let exponent = |x: &ComplexArray2D| -> f64 {
            let ax = apply_forward(&m, x).unwrap();
            let mut s = 0.0;
            for (a, b) in y.coils().iter().zip(ax.coils()) {
                s += crate::numerics::squared_distance(a, b).unwrap();
            }
            -s / (m.sigma_eta() * m.sigma_eta())
        };
        let g = likelihood_grad(&m, &y, &x).unwrap();
        // the exponent is quadratic, so a large step costs no truncation error
        let h = 1e-2;
        for idx in 0..64 {
            for (part, unit) in [(0, Complex64::new(1.0, 0.0)), (1, Complex64::new(0.0, 1.0))] {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data_mut()[idx] += unit * h;
                xm.data_mut()[idx] -= unit * h;
                let fd = (exponent(&xp) - exponent(&xm)) / (2.0 * h);
                let an = 2.0
                    * if part == 0 {
                        g.data()[idx].re
                    } else {
                        g.data()[idx].im
                    };
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "idx {idx} part {part}: fd {fd} vs {an}");
            }
        }
    }
}
