//! Image sequences, synthetic phantom volumes, and on-disk formats.
//!
//! The AIDA container is a little-endian binary array file:
//!
//! | field   | bytes        | notes                                  |
//! |---------|--------------|----------------------------------------|
//! | magic   | 4            | `b"AIDA"`                              |
//! | version | 4 (u32)      | currently 1                            |
//! | dtype   | 4 (u32)      | 0 = c128, 1 = f64, 2 = u8              |
//! | ndim    | 4 (u32)      |                                        |
//! | dims    | 8 * ndim     | u64 each, slowest axis first           |
//! | payload | prod(dims)*s | c128 stored as interleaved (re, im) f64 |

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::numerics::{ComplexArray2D, RngStream};

/// Ordered frames of identical shape, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    frames: Vec<ComplexArray2D>,
}

impl ImageSequence {
    pub fn new(frames: Vec<ComplexArray2D>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| AidError::arg("image sequence must contain at least one frame"))?;
        for (i, f) in frames.iter().enumerate().skip(1) {
            if f.shape() != first.shape() {
                return Err(AidError::dim(format!(
                    "frame {i} has shape {:?}, expected {:?}",
                    f.shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[ComplexArray2D] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<ComplexArray2D> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.frames.iter().map(|f| f.max_abs()).fold(0.0, f64::max)
    }

    /// Contiguous sub-sequence `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(AidError::arg(format!(
                "slice {start}..{end} of a {}-frame sequence",
                self.len()
            )));
        }
        Ok(Self {
            frames: self.frames[start..end].to_vec(),
        })
    }
}

/// Scales the whole sequence by one factor so its peak magnitude is 1.
pub fn normalize_sequence(seq: &ImageSequence) -> Result<ImageSequence> {
    let peak = seq.max_magnitude();
    if peak.is_nan() || peak <= 0.0 {
        return Err(AidError::arg("cannot normalise an all-zero sequence"));
    }
    Ok(ImageSequence {
        frames: seq.frames.iter().map(|f| f.scale(1.0 / peak)).collect(),
    })
}

/// Parameters of a synthetic ellipse-phantom volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Image side length (power of two).
    pub n: usize,
    /// Number of frames.
    pub frames: usize,
    pub n_ellipses: usize,
    /// Per-frame centre drift, in units of the field of view.
    pub translation_rate: f64,
    /// Per-frame rotation, radians.
    pub rotation_rate: f64,
    /// Per-frame relative change of ellipse intensity.
    pub intensity_rate: f64,
    /// Per-frame relative change of ellipse axes.
    pub scale_rate: f64,
    /// Peak phase excursion of the smooth phase map, radians.
    pub phase_amplitude: f64,
    /// Per-frame phase drift, radians.
    pub phase_rate: f64,
}

impl PhantomSpec {
    /// Default motion rates at size `n` with `frames` frames.
    pub fn new(n: usize, frames: usize) -> Self {
        Self {
            n,
            frames,
            n_ellipses: 6,
            translation_rate: 0.006,
            rotation_rate: 0.02,
            intensity_rate: 0.03,
            scale_rate: 0.03,
            phase_amplitude: 1.0,
            phase_rate: 0.05,
        }
    }

    /// Same layout with all motion switched off.
    pub fn static_frames(mut self) -> Self {
        self.translation_rate = 0.0;
        self.rotation_rate = 0.0;
        self.intensity_rate = 0.0;
        self.scale_rate = 0.0;
        self.phase_rate = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n.is_power_of_two() || self.n < 4 {
            return Err(AidError::arg(format!(
                "phantom size {} must be a power of two >= 4",
                self.n
            )));
        }
        if self.frames < 2 {
            return Err(AidError::arg("phantom needs at least two frames"));
        }
        if self.n_ellipses == 0 {
            return Err(AidError::arg("phantom needs at least one ellipse"));
        }
        let rates = [
            self.translation_rate,
            self.rotation_rate,
            self.intensity_rate,
            self.scale_rate,
            self.phase_amplitude,
            self.phase_rate,
        ];
        if rates.iter().any(|r| !r.is_finite()) {
            return Err(AidError::arg("phantom rates must be finite"));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
    intensity: f64,
    // per-ellipse motion directions in [-1, 1]
    vx: f64,
    vy: f64,
    vs: f64,
    vi: f64,
}

fn smoothstep_edge(r: f64, width: f64) -> f64 {
    // 1 inside, 0 outside, logistic transition of `width` around r = 1
    1.0 / (1.0 + ((r - 1.0) / width).exp())
}

/// Ellipse-composite frames whose geometry drifts smoothly from frame to
/// frame, with a smooth complex phase shared across the volume. The result is
/// normalised to a peak magnitude of 1.
pub fn make_phantom_sequence(spec: &PhantomSpec, rng: &mut RngStream) -> Result<ImageSequence> {
    spec.validate()?;
    let n = spec.n;
    // body outline first, then interior structures
    let mut ellipses = vec![Ellipse {
        cx: rng.uniform_range(-0.03, 0.03),
        cy: rng.uniform_range(-0.03, 0.03),
        ax: rng.uniform_range(0.34, 0.42),
        ay: rng.uniform_range(0.40, 0.46),
        angle: rng.uniform_range(-0.2, 0.2),
        intensity: 0.5,
        vx: rng.uniform_range(-0.3, 0.3),
        vy: rng.uniform_range(-0.3, 0.3),
        vs: rng.uniform_range(-0.5, 0.5),
        vi: 0.0,
    }];
    for _ in 1..spec.n_ellipses {
        ellipses.push(Ellipse {
            cx: rng.uniform_range(-0.2, 0.2),
            cy: rng.uniform_range(-0.25, 0.25),
            ax: rng.uniform_range(0.04, 0.14),
            ay: rng.uniform_range(0.04, 0.16),
            angle: rng.uniform_range(0.0, PI),
            intensity: rng.uniform_range(-0.3, 0.5),
            vx: rng.uniform_range(-1.0, 1.0),
            vy: rng.uniform_range(-1.0, 1.0),
            vs: rng.uniform_range(-1.0, 1.0),
            vi: rng.uniform_range(-1.0, 1.0),
        });
    }
    let phase = [
        rng.uniform_range(-PI, PI),
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
        rng.uniform_range(-1.0, 1.0),
    ];
    let edge = 1.0 / n as f64 * 1.5;

    let frames = (0..spec.frames)
        .map(|k| {
            let kf = k as f64;
            let rot = spec.rotation_rate * kf;
            let (sr, cr) = rot.sin_cos();
            let drift = spec.phase_rate * kf;
            ComplexArray2D::from_fn(n, n, |r, c| {
                // normalised coordinates in [-0.5, 0.5)
                let y = (r as f64 + 0.5) / n as f64 - 0.5;
                let x = (c as f64 + 0.5) / n as f64 - 0.5;
                let mut mag = 0.0;
                for e in &ellipses {
                    let cx = e.cx + spec.translation_rate * e.vx * kf;
                    let cy = e.cy + spec.translation_rate * e.vy * kf;
                    let grow = (1.0 + spec.scale_rate * e.vs * kf).max(0.05);
                    let (sa, ca) = (e.angle + rot).sin_cos();
                    // rotate the whole layout about the origin, then the ellipse frame
                    let (gx, gy) = (cr * cx - sr * cy, sr * cx + cr * cy);
                    let (dx, dy) = (x - gx, y - gy);
                    let u = (ca * dx + sa * dy) / (e.ax * grow);
                    let v = (-sa * dx + ca * dy) / (e.ay * grow);
                    let rr = (u * u + v * v).sqrt();
                    let inten = e.intensity * (1.0 + spec.intensity_rate * e.vi * kf);
                    mag += inten * smoothstep_edge(rr, edge / (e.ax.min(e.ay) * grow));
                }
                let mag = mag.max(0.0);
                let ph = spec.phase_amplitude
                    * (phase[1] * x + phase[2] * y + phase[3] * (x * x + y * y) * 2.0)
                    + phase[0]
                    + drift;
                Complex64::from_polar(mag, ph)
            })
        })
        .collect();
    normalize_sequence(&ImageSequence::new(frames)?)
}

/// Pearson correlation of the magnitudes of two frames.
pub fn magnitude_correlation(a: &ComplexArray2D, b: &ComplexArray2D) -> f64 {
    let x = a.magnitudes();
    let y = b.magnitudes();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (u, v) in x.iter().zip(&y) {
        sxy += (u - mx) * (v - my);
        sxx += (u - mx) * (u - mx);
        syy += (v - my) * (v - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return if sxx == syy { 1.0 } else { 0.0 };
    }
    sxy / (sxx * syy).sqrt()
}

const MAGIC: &[u8; 4] = b"AIDA";
const VERSION: u32 = 1;

/// Element type of an AIDA container.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    C128 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::C128 => 16,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::C128),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }
}

/// Typed payload of an AIDA container.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    C128(Vec<Complex64>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::C128(_) => DType::C128,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::C128(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// N-dimensional array as stored in an AIDA file.
#[derive(Clone, Debug, PartialEq)]
pub struct AidaArray {
    pub dims: Vec<u64>,
    pub data: ArrayData,
}

impl AidaArray {
    pub fn new(dims: Vec<u64>, data: ArrayData) -> Result<Self> {
        let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        if count != Some(data.len() as u64) {
            return Err(AidError::dim(format!(
                "dims {dims:?} do not match {} elements",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_complex2d(x: &ComplexArray2D) -> Self {
        Self {
            dims: vec![x.rows() as u64, x.cols() as u64],
            data: ArrayData::C128(x.data().to_vec()),
        }
    }

    /// Stacks equally shaped images along a leading axis.
    pub fn from_stack(frames: &[ComplexArray2D]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| AidError::arg("cannot stack zero frames"))?;
        let mut data = Vec::with_capacity(frames.len() * first.len());
        for f in frames {
            first.check_same_shape(f)?;
            data.extend_from_slice(f.data());
        }
        Ok(Self {
            dims: vec![
                frames.len() as u64,
                first.rows() as u64,
                first.cols() as u64,
            ],
            data: ArrayData::C128(data),
        })
    }

    pub fn to_complex2d(&self) -> Result<ComplexArray2D> {
        match (&self.data, self.dims.as_slice()) {
            (ArrayData::C128(v), [r, c]) => {
                ComplexArray2D::new(*r as usize, *c as usize, v.clone())
            }
            _ => Err(AidError::dim(format!(
                "expected a 2-D c128 array, got {:?} with dims {:?}",
                self.data.dtype(),
                self.dims
            ))),
        }
    }

    /// Splits along the leading axis of a 3-D c128 array.
    pub fn to_stack(&self) -> Result<Vec<ComplexArray2D>> {
        match (&self.data, self.dims.as_slice()) {
            (ArrayData::C128(v), [n, r, c]) => {
                let per = (*r * *c) as usize;
                (0..*n as usize)
                    .map(|i| {
                        ComplexArray2D::new(
                            *r as usize,
                            *c as usize,
                            v[i * per..(i + 1) * per].to_vec(),
                        )
                    })
                    .collect()
            }
            (ArrayData::C128(_), [_, _]) => Ok(vec![self.to_complex2d()?]),
            _ => Err(AidError::dim(format!(
                "expected a 3-D c128 array, got {:?} with dims {:?}",
                self.data.dtype(),
                self.dims
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            ArrayData::F64(v) => Ok(v),
            other => Err(AidError::dim(format!(
                "expected f64 array, got {:?}",
                other.dtype()
            ))),
        }
    }

    /// Encodes header and payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            16 + 8 * self.dims.len() + self.data.len() * self.data.dtype().size(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.data.dtype() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            ArrayData::C128(v) => {
                for z in v {
                    out.extend_from_slice(&z.re.to_le_bytes());
                    out.extend_from_slice(&z.im.to_le_bytes());
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            ArrayData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    /// Decodes a complete container, rejecting bad headers and truncation.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(AidError::format(0, "bad magic, expected AIDA"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(AidError::format(
                4,
                format!("unsupported version {version}"),
            ));
        }
        let code = cur.u32()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| AidError::format(8, format!("unknown dtype code {code}")))?;
        let ndim = cur.u32()? as usize;
        if ndim > 8 {
            return Err(AidError::format(12, format!("unsupported rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()?);
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|c| c.checked_mul(dtype.size() as u64))
            .ok_or_else(|| AidError::format(16, "payload size overflows"))?;
        let payload_start = cur.pos as u64;
        let available = (bytes.len() - cur.pos) as u64;
        if available < count {
            return Err(AidError::format(
                payload_start + available,
                format!("truncated payload: need {count} bytes, found {available}"),
            ));
        }
        if available > count {
            return Err(AidError::format(
                payload_start + count,
                format!("{} trailing bytes after payload", available - count),
            ));
        }
        let payload = cur.take(count as usize)?;
        let data = match dtype {
            DType::C128 => ArrayData::C128(
                payload
                    .chunks_exact(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
            DType::F64 => ArrayData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => ArrayData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(AidError::format(
                self.bytes.len() as u64,
                format!("truncated header: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes an AIDA container.
pub fn save_aida(path: impl AsRef<Path>, array: &AidaArray) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&array.to_bytes())?;
    Ok(())
}

/// Reads an AIDA container.
pub fn load_aida(path: impl AsRef<Path>) -> Result<AidaArray> {
    AidaArray::from_bytes(&fs::read(path.as_ref())?)
}

pub fn save_array(path: impl AsRef<Path>, x: &ComplexArray2D) -> Result<()> {
    save_aida(path, &AidaArray::from_complex2d(x))
}

pub fn load_array(path: impl AsRef<Path>) -> Result<ComplexArray2D> {
    load_aida(path)?.to_complex2d()
}

pub fn save_sequence(path: impl AsRef<Path>, seq: &ImageSequence) -> Result<()> {
    save_aida(path, &AidaArray::from_stack(seq.frames())?)
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<ImageSequence> {
    ImageSequence::new(load_aida(path)?.to_stack()?)
}

/// Path of the JSON metadata sidecar for `path` (`<path>.json`).
pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes free-form metadata next to a container.
pub fn write_sidecar<T: Serialize>(path: impl AsRef<Path>, meta: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)
        .map_err(|e| AidError::config(format!("cannot encode sidecar: {e}")))?;
    fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

pub fn read_sidecar<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let p = sidecar_path(path);
    let text = fs::read_to_string(&p)?;
    serde_json::from_str(&text)
        .map_err(|e| AidError::format(e.column() as u64, format!("{}: {e}", p.display())))
}

/// 16-bit binary PGM bytes of the min-max scaled magnitude image.
pub fn pgm_bytes(x: &ComplexArray2D) -> Vec<u8> {
    let mags = x.magnitudes();
    let lo = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n65535\n", x.cols(), x.rows()).into_bytes();
    for m in mags {
        let v = if span > 0.0 {
            ((m - lo) / span * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Writes a 16-bit PGM preview of the magnitude image.
pub fn export_pgm(path: impl AsRef<Path>, x: &ComplexArray2D) -> Result<()> {
    fs::write(path.as_ref(), pgm_bytes(x))?;
    Ok(())
}
