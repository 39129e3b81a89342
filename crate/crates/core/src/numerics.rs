//! Complex 2-D arrays, unitary FFTs, inner products and seeded random streams.
//!
//! Every image, noise field and k-space plane in the crate is a
//! [`ComplexArray2D`] stored in row-major order. The 2-D DFT is unitary
//! (`1/sqrt(n)` per axis) with the frequency origin at index `(0, 0)`, so the
//! forward operator and its adjoint are exact adjoints of each other.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{AidError, Result};

/// Dense complex matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct ComplexArray2D {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl fmt::Debug for ComplexArray2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComplexArray2D")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("norm", &self.norm())
            .finish()
    }
}

impl ComplexArray2D {
    /// Builds an array, rejecting empty shapes, length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(AidError::dim(format!("empty shape {rows}x{cols}")));
        }
        if rows * cols != data.len() {
            return Err(AidError::dim(format!(
                "{rows}x{cols} array needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|z| !z.is_finite()) {
            return Err(AidError::numeric(format!(
                "non-finite entry at ({}, {})",
                i / cols,
                i % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty shape");
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        assert!(rows > 0 && cols > 0, "empty shape");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Real-valued image from magnitudes.
    pub fn from_real(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(
            rows,
            cols,
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.is_finite())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise distance to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped arrays.
    pub fn zip_map(
        &self,
        other: &Self,
        f: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        self.check_same_shape(x)?;
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += v * a;
        }
        Ok(())
    }

    /// Weighted sum `a * x + b * y` of two equally shaped arrays.
    pub fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        x.zip_map(y, |u, v| u * a + v * b)
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AidError::dim(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Swaps quadrants so that index (0, 0) moves to the array centre.
    pub fn fftshift(&self) -> Self {
        self.roll(self.rows / 2, self.cols / 2)
    }

    /// Inverse of [`fftshift`](Self::fftshift).
    pub fn ifftshift(&self) -> Self {
        self.roll(self.rows - self.rows / 2, self.cols - self.cols / 2)
    }

    /// Circular shift: entry `(r, c)` moves to `(r + dr, c + dc)`.
    pub fn roll(&self, dr: usize, dc: usize) -> Self {
        let (rows, cols) = self.shape();
        Self::from_fn(rows, cols, |r, c| {
            self.get((r + rows - dr % rows) % rows, (c + cols - dc % cols) % cols)
        })
    }
}

impl Add for &ComplexArray2D {
    type Output = ComplexArray2D;

    fn add(self, rhs: Self) -> ComplexArray2D {
        self.zip_map(rhs, |a, b| a + b)
            .expect("shape mismatch in add")
    }
}

impl Sub for &ComplexArray2D {
    type Output = ComplexArray2D;

    fn sub(self, rhs: Self) -> ComplexArray2D {
        self.zip_map(rhs, |a, b| a - b)
            .expect("shape mismatch in sub")
    }
}

impl Mul<f64> for &ComplexArray2D {
    type Output = ComplexArray2D;

    fn mul(self, rhs: f64) -> ComplexArray2D {
        self.scale(rhs)
    }
}

fn check_pow2(x: &ComplexArray2D) -> Result<()> {
    let (rows, cols) = x.shape();
    if !rows.is_power_of_two() || !cols.is_power_of_two() {
        return Err(AidError::dim(format!(
            "fft2 needs power-of-two dimensions, got {rows}x{cols}"
        )));
    }
    Ok(())
}

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, PlanCache)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    let inverse = matches!(direction, FftDirection::Inverse);
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((len, inverse))
            .or_insert_with(|| planner.plan_fft(len, direction))
            .clone()
    })
}

fn fft2_dir(x: &ComplexArray2D, direction: FftDirection) -> Result<ComplexArray2D> {
    check_pow2(x)?;
    let (rows, cols) = x.shape();
    let mut data = x.data.clone();

    let row_fft = plan(cols, direction);
    let mut scratch = vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len()];
    for row in data.chunks_exact_mut(cols) {
        row_fft.process_with_scratch(row, &mut scratch);
    }

    let col_fft = plan(rows, direction);
    let mut scratch = vec![Complex64::new(0.0, 0.0); col_fft.get_inplace_scratch_len()];
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }

    let norm = 1.0 / ((rows * cols) as f64).sqrt();
    for z in &mut data {
        *z *= norm;
    }
    Ok(ComplexArray2D { rows, cols, data })
}

/// Unitary forward 2-D DFT, frequency origin at index (0, 0).
pub fn fft2(x: &ComplexArray2D) -> Result<ComplexArray2D> {
    fft2_dir(x, FftDirection::Forward)
}

/// Unitary inverse 2-D DFT; exact adjoint and inverse of [`fft2`].
pub fn ifft2(k: &ComplexArray2D) -> Result<ComplexArray2D> {
    fft2_dir(k, FftDirection::Inverse)
}

/// `sum(conj(a) * b)`
pub fn inner(a: &ComplexArray2D, b: &ComplexArray2D) -> Result<Complex64> {
    a.check_same_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x.conj() * y).sum())
}

/// Squared Euclidean distance between two equally shaped arrays, summed in
/// row-major order.
pub fn squared_distance(a: &ComplexArray2D, b: &ComplexArray2D) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum())
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream: ChaCha20 keyed by `seed_from_u64(seed)` and
/// positioned on stream `stream_id`.
///
/// Two streams with the same `(seed, stream_id)` produce bit-identical draws.
/// [`split`](Self::split) derives child streams whose ids are SplitMix64
/// hashes of the parent id and child index, so splitting does not depend on
/// how many values the parent has already produced.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream number `index`.
    pub fn split(&self, index: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(1)));
        RngStream::new(self.seed, id)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Complex draw with independent standard-normal real and imaginary parts.
    pub fn complex_normal(&mut self) -> Complex64 {
        let re = self.normal();
        let im = self.normal();
        Complex64::new(re, im)
    }

    /// `rows x cols` array of [`complex_normal`](Self::complex_normal) draws.
    pub fn normal_array(&mut self, rows: usize, cols: usize) -> ComplexArray2D {
        ComplexArray2D::from_fn(rows, cols, |_, _| self.complex_normal())
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Brute-force unitary DFT, O(n^4).
    fn direct_dft(x: &ComplexArray2D, sign: f64) -> ComplexArray2D {
        let (rows, cols) = x.shape();
        let norm = 1.0 / ((rows * cols) as f64).sqrt();
        ComplexArray2D::from_fn(rows, cols, |u, v| {
            let mut acc = c(0.0, 0.0);
            for r in 0..rows {
                for cc in 0..cols {
                    let phase = sign
                        * 2.0
                        * std::f64::consts::PI
                        * ((u * r) as f64 / rows as f64 + (v * cc) as f64 / cols as f64);
                    acc += x.get(r, cc) * Complex64::from_polar(1.0, phase);
                }
            }
            acc * norm
        })
    }

    #[test]
    fn delta_transforms_to_constant() {
        let mut x = ComplexArray2D::zeros(4, 4);
        x.set(0, 0, c(1.0, 0.0));
        let k = fft2(&x).unwrap();
        for z in k.data() {
            assert!((z - c(0.25, 0.0)).norm() < 1e-15);
        }
        let back = ifft2(&k).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn constant_inverse_transforms_to_delta() {
        let k = ComplexArray2D::from_fn(4, 4, |_, _| c(0.25, 0.0));
        let x = ifft2(&k).unwrap();
        let mut delta = ComplexArray2D::zeros(4, 4);
        delta.set(0, 0, c(1.0, 0.0));
        assert!(x.max_abs_diff(&delta) < 1e-15);
    }

    #[test]
    fn matches_direct_dft_on_8x8() {
        let mut rng = RngStream::new(11, 0);
        let x = rng.normal_array(8, 8);
        assert!(fft2(&x).unwrap().max_abs_diff(&direct_dft(&x, -1.0)) < 1e-12);
        assert!(ifft2(&x).unwrap().max_abs_diff(&direct_dft(&x, 1.0)) < 1e-12);
        // rectangular power-of-two shape
        let y = rng.normal_array(4, 8);
        assert!(fft2(&y).unwrap().max_abs_diff(&direct_dft(&y, -1.0)) < 1e-12);
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = RngStream::new(3, 1);
        let x = rng.normal_array(32, 32);
        assert!(ifft2(&fft2(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-12);
        assert!(fft2(&ifft2(&x).unwrap()).unwrap().max_abs_diff(&x) < 1e-12);
        let y = rng.normal_array(64, 64);
        let k = fft2(&y).unwrap();
        assert!((k.norm() - y.norm()).abs() < 1e-12 * y.norm());
    }

    #[test]
    fn round_trip_all_sizes_up_to_256() {
        let mut rng = RngStream::new(5, 5);
        let mut n = 1;
        while n <= 256 {
            let x = rng.normal_array(n, n);
            let back = ifft2(&fft2(&x).unwrap()).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-12, "n = {n}");
            n *= 2;
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let x = ComplexArray2D::zeros(6, 8);
        assert!(matches!(fft2(&x), Err(AidError::Dimension(_))));
        assert!(matches!(ifft2(&x), Err(AidError::Dimension(_))));
    }

    #[test]
    fn inner_product_properties() {
        let mut rng = RngStream::new(9, 2);
        let a = rng.normal_array(16, 16);
        let b = rng.normal_array(16, 16);
        let aa = inner(&a, &a).unwrap();
        assert!(aa.im.abs() < 1e-12 && aa.re > 0.0);
        assert!((aa.re - a.norm_sqr()).abs() < 1e-9);
        let ab = inner(&a, &b).unwrap();
        let ba = inner(&b, &a).unwrap();
        assert!((ab - ba.conj()).norm() < 1e-12);
        let fa = fft2(&a).unwrap();
        let fb = fft2(&b).unwrap();
        let lhs = inner(&fa, &fb).unwrap();
        assert!((lhs - ab).norm() < 1e-12 * a.norm() * b.norm());
        // same identity against the brute-force DFT on 8x8
        let a8 = rng.normal_array(8, 8);
        let b8 = rng.normal_array(8, 8);
        let direct = inner(&direct_dft(&a8, -1.0), &direct_dft(&b8, -1.0)).unwrap();
        let expect = inner(&a8, &b8).unwrap();
        assert!((direct - expect).norm() < 1e-12 * a8.norm() * b8.norm());
        assert!(inner(&a, &ComplexArray2D::zeros(8, 8)).is_err());
    }

    #[test]
    fn shift_helpers_invert() {
        let mut rng = RngStream::new(1, 1);
        let x = rng.normal_array(8, 4);
        assert_eq!(x.fftshift().ifftshift(), x);
        let mut delta = ComplexArray2D::zeros(8, 8);
        delta.set(0, 0, c(1.0, 0.0));
        assert_eq!(delta.fftshift().get(4, 4), c(1.0, 0.0));
    }

    #[test]
    fn constructor_validates() {
        assert!(ComplexArray2D::new(2, 2, vec![c(0.0, 0.0); 3]).is_err());
        assert!(ComplexArray2D::new(1, 1, vec![c(f64::NAN, 0.0)]).is_err());
        assert!(ComplexArray2D::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        let mut other = RngStream::new(42, 8);
        let xs: Vec<u64> = (0..64).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..64).map(|_| other.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);

        let parent = RngStream::new(42, 7);
        let mut advanced = parent.clone();
        advanced.normal();
        assert_eq!(
            parent.split(3).next_u64(),
            advanced.split(3).next_u64(),
            "split must not depend on parent position"
        );
        assert_ne!(parent.split(3).next_u64(), parent.split(4).next_u64());
    }

    #[test]
    fn split_streams_are_uncorrelated() {
        let root = RngStream::new(1, 0);
        let mut a = root.split(0);
        let mut b = root.split(1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.normal()).collect();
        let corr = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        // 4 standard errors of the sample correlation
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr = {corr}");
    }
}
