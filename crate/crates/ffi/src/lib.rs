//! C ABI over `aid-core`.
//!
//! Every object crosses the boundary as an opaque handle created by an
//! `aid_*_new` / `aid_*_load` function and released by the matching
//! `aid_*_free`. Fallible functions return an [`AidStatus`] and write their
//! result through an out-pointer; on failure a message is kept per thread
//! and can be read with [`aid_last_error`]. Panics never unwind into C.
//!
//! # Safety
//!
//! Every pointer argument must be null or valid for the access its
//! documentation describes; handles must come from this library and not
//! be used after being freed. Buffers are read or written for exactly the
//! stated length.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use aid_core::denoiser::{load_checkpoint, Denoiser, GaussianOracle, GaussianPriorSpec, TscNet};
use aid_core::diffusion::{make_schedule, NoiseSchedule};
use aid_core::mri::{
    apply_adjoint, apply_forward, make_mask, synth_coils, CoilSensitivities, ForwardModel,
    KSpaceFrame, MaskKind,
};
use aid_core::numerics::{fft2, ifft2};
use aid_core::sampler::{mmse_and_ci, nrmse, psnr, reconstruct, PosteriorSamples, ReconConfig};
use aid_core::{AidError, ComplexArray2D, RngStream};
use num_complex::Complex64;

/// Result code of every fallible call. The nonzero values 2–4 match the
/// exit codes of the `aid` CLI.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AidStatus {
    Ok = 0,
    /// Invalid argument, configuration or dimensions.
    Config = 2,
    Numeric = 3,
    /// File or format error.
    Io = 4,
    /// A required pointer was null.
    NullPointer = 5,
    /// Internal panic caught at the boundary.
    Panic = 6,
}

/// Complex image.
pub struct AidImage(ComplexArray2D);

/// Noise schedule.
pub struct AidSchedule(NoiseSchedule);

/// Forward operator `A = P F S`.
pub struct AidForwardModel(ForwardModel);

/// Multi-coil k-space frame.
pub struct AidKSpace(KSpaceFrame);

/// Noise predictor together with the schedule it runs on.
pub struct AidDenoiser {
    model: Box<dyn Denoiser>,
    sched: NoiseSchedule,
}

/// Posterior samples of a reconstructed sequence.
pub struct AidPosterior(PosteriorSamples);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &AidError) -> AidStatus {
    match e.exit_code() {
        2 => AidStatus::Config,
        3 => AidStatus::Numeric,
        _ => AidStatus::Io,
    }
}

enum Fail {
    Core(AidError),
    Null(&'static str),
}

impl From<AidError> for Fail {
    fn from(e: AidError) -> Self {
        Fail::Core(e)
    }
}

type FfiResult<T> = Result<T, Fail>;

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> AidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AidStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AidStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AidStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn c_str<'a>(s: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if s.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail::Core(config_error(format!("{what} is not UTF-8"))))
}

fn config_error(msg: String) -> AidError {
    AidError::Config(msg)
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL, or
/// 0 when no error has been recorded.
#[no_mangle]
pub unsafe extern "C" fn aid_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds an image from `rows * cols` interleaved `(re, im)` pairs.
#[no_mangle]
pub unsafe extern "C" fn aid_image_new(
    rows: usize,
    cols: usize,
    interleaved: *const f64,
    out: *mut *mut AidImage,
) -> AidStatus {
    guard(|| {
        if interleaved.is_null() {
            return Err(Fail::Null("interleaved"));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| config_error("image size overflows".into()))?;
        let raw = std::slice::from_raw_parts(interleaved, 2 * n);
        let data = raw
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        put(out, AidImage(ComplexArray2D::new(rows, cols, data)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn aid_image_free(img: *mut AidImage) {
    free(img)
}

/// Writes the shape of `img`.
#[no_mangle]
pub unsafe extern "C" fn aid_image_shape(
    img: *const AidImage,
    rows: *mut usize,
    cols: *mut usize,
) -> AidStatus {
    guard(|| {
        let img = deref(img, "img")?;
        if rows.is_null() || cols.is_null() {
            return Err(Fail::Null("rows/cols"));
        }
        *rows = img.0.rows();
        *cols = img.0.cols();
        Ok(())
    })
}

/// Copies the pixels as interleaved `(re, im)` into `out`, which must hold
/// `len >= 2 * rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn aid_image_read(
    img: *const AidImage,
    out: *mut f64,
    len: usize,
) -> AidStatus {
    guard(|| {
        let img = deref(img, "img")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let need = 2 * img.0.len();
        if len < need {
            return Err(config_error(format!("buffer holds {len} doubles, need {need}")).into());
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (d, z) in dst.chunks_exact_mut(2).zip(img.0.data()) {
            d[0] = z.re;
            d[1] = z.im;
        }
        Ok(())
    })
}

/// Unitary 2-D FFT (power-of-two sides).
#[no_mangle]
pub unsafe extern "C" fn aid_fft2(img: *const AidImage, out: *mut *mut AidImage) -> AidStatus {
    guard(|| put(out, AidImage(fft2(&deref(img, "img")?.0)?)))
}

#[no_mangle]
pub unsafe extern "C" fn aid_ifft2(img: *const AidImage, out: *mut *mut AidImage) -> AidStatus {
    guard(|| put(out, AidImage(ifft2(&deref(img, "img")?.0)?)))
}

/// Linear schedule with `steps` steps from `beta_min` to `beta_max`.
#[no_mangle]
pub unsafe extern "C" fn aid_schedule_new(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    out: *mut *mut AidSchedule,
) -> AidStatus {
    guard(|| put(out, AidSchedule(make_schedule(steps, beta_min, beta_max)?)))
}

#[no_mangle]
pub unsafe extern "C" fn aid_schedule_free(s: *mut AidSchedule) {
    free(s)
}

/// `alpha_bar_t` for `t` in `0..=T` (`alpha_bar_0 = 1`).
#[no_mangle]
pub unsafe extern "C" fn aid_schedule_alpha_bar(
    s: *const AidSchedule,
    t: usize,
    out: *mut f64,
) -> AidStatus {
    guard(|| {
        let s = deref(s, "schedule")?;
        if t > s.0.steps() {
            return Err(config_error(format!("step {t} outside 0..={}", s.0.steps())).into());
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = s.0.alpha_bar(t);
        Ok(())
    })
}

/// Forward operator on `n x n` images. `mask_kind` is one of `random-acs`,
/// `random-noacs`, `equispaced-acs`, `equispaced-noacs`, `odd-lines`,
/// `full`. One coil gives unit sensitivity; more are synthesised from
/// `seed`, which also draws random masks.
#[no_mangle]
pub unsafe extern "C" fn aid_forward_model_new(
    mask_kind: *const c_char,
    n: usize,
    factor: f64,
    acs_width: usize,
    coils: usize,
    sigma_eta: f64,
    seed: u64,
    out: *mut *mut AidForwardModel,
) -> AidStatus {
    guard(|| {
        let kind: MaskKind = c_str(mask_kind, "mask_kind")?.parse()?;
        let rng = RngStream::new(seed, 0);
        let maps = match coils {
            1 => CoilSensitivities::unit(n, n),
            _ => synth_coils(n, coils, &mut rng.split(1))?,
        };
        let mask = make_mask(kind, n, factor, acs_width, &mut rng.split(2))?;
        put(
            out,
            AidForwardModel(ForwardModel::new(mask, maps, sigma_eta)?),
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn aid_forward_model_free(m: *mut AidForwardModel) {
    free(m)
}

/// `y = A x`.
#[no_mangle]
pub unsafe extern "C" fn aid_forward_apply(
    m: *const AidForwardModel,
    x: *const AidImage,
    out: *mut *mut AidKSpace,
) -> AidStatus {
    guard(|| {
        let y = apply_forward(&deref(m, "model")?.0, &deref(x, "x")?.0)?;
        put(out, AidKSpace(y))
    })
}

/// `A^H y`.
#[no_mangle]
pub unsafe extern "C" fn aid_adjoint_apply(
    m: *const AidForwardModel,
    y: *const AidKSpace,
    out: *mut *mut AidImage,
) -> AidStatus {
    guard(|| {
        let x = apply_adjoint(&deref(m, "model")?.0, &deref(y, "y")?.0)?;
        put(out, AidImage(x))
    })
}

/// Adds circular complex noise of standard deviation `sigma` on sampled
/// locations.
#[no_mangle]
pub unsafe extern "C" fn aid_kspace_add_noise(
    m: *const AidForwardModel,
    y: *mut AidKSpace,
    sigma: f64,
    seed: u64,
) -> AidStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let y = y.as_mut().ok_or(Fail::Null("y"))?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(config_error(format!("noise level {sigma} must be nonnegative")).into());
        }
        y.0.add_noise(&m.0, sigma, &mut RngStream::new(seed, 0));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn aid_kspace_free(y: *mut AidKSpace) {
    free(y)
}

/// Loads a checkpoint directory written by `aid train`.
#[no_mangle]
pub unsafe extern "C" fn aid_denoiser_load(
    path: *const c_char,
    out: *mut *mut AidDenoiser,
) -> AidStatus {
    guard(|| {
        let ckpt = load_checkpoint(c_str(path, "path")?)?;
        let sched = ckpt.schedule()?;
        put(
            out,
            AidDenoiser {
                model: Box::new(TscNet::new(ckpt.params)),
                sched,
            },
        )
    })
}

/// Analytic denoiser for the prior `N(mean, var)` per real component.
#[no_mangle]
pub unsafe extern "C" fn aid_denoiser_gaussian(
    mean: *const AidImage,
    var: f64,
    sched: *const AidSchedule,
    out: *mut *mut AidDenoiser,
) -> AidStatus {
    guard(|| {
        let prior = GaussianPriorSpec::isotropic(deref(mean, "mean")?.0.clone(), var)?;
        let sched = deref(sched, "schedule")?.0.clone();
        put(
            out,
            AidDenoiser {
                model: Box::new(GaussianOracle::new(prior, sched.clone())),
                sched,
            },
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn aid_denoiser_free(d: *mut AidDenoiser) {
    free(d)
}

/// Posterior reconstruction settings.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct AidReconParams {
    pub lambda: f64,
    pub k_iters: usize,
    pub samples: usize,
    /// Nonzero re-injects noise after the data-consistency step.
    pub noise_inject: i32,
    pub seed: u64,
}

/// Defaults: `lambda = 1`, `K = 5`, `S = 1`, noise injection on, seed 0.
#[no_mangle]
pub extern "C" fn aid_recon_params_default() -> AidReconParams {
    let d = ReconConfig::default();
    AidReconParams {
        lambda: d.lambda,
        k_iters: d.k_iters,
        samples: d.samples,
        noise_inject: d.noise_inject as i32,
        seed: 0,
    }
}

/// Reconstructs `n_frames` k-space frames in order, conditioning the first on
/// `x0`.
#[no_mangle]
pub unsafe extern "C" fn aid_reconstruct(
    d: *const AidDenoiser,
    m: *const AidForwardModel,
    kspace: *const *const AidKSpace,
    n_frames: usize,
    x0: *const AidImage,
    params: AidReconParams,
    out: *mut *mut AidPosterior,
) -> AidStatus {
    guard(|| {
        let d = deref(d, "denoiser")?;
        let m = deref(m, "model")?;
        let x0 = deref(x0, "x0")?;
        if kspace.is_null() {
            return Err(Fail::Null("kspace"));
        }
        let frames = std::slice::from_raw_parts(kspace, n_frames)
            .iter()
            .map(|&p| deref(p, "kspace[i]").map(|y| y.0.clone()))
            .collect::<FfiResult<Vec<_>>>()?;
        let cfg = ReconConfig {
            lambda: params.lambda,
            k_iters: params.k_iters,
            samples: params.samples,
            noise_inject: params.noise_inject != 0,
            ..ReconConfig::default()
        };
        let rng = RngStream::new(params.seed, 0);
        let post = reconstruct(d.model.as_ref(), &m.0, &frames, &x0.0, &cfg, &d.sched, &rng)?;
        put(out, AidPosterior(post))
    })
}

#[no_mangle]
pub unsafe extern "C" fn aid_posterior_free(p: *mut AidPosterior) {
    free(p)
}

/// Sample `s` of frame `frame`.
#[no_mangle]
pub unsafe extern "C" fn aid_posterior_sample(
    p: *const AidPosterior,
    frame: usize,
    s: usize,
    out: *mut *mut AidImage,
) -> AidStatus {
    guard(|| {
        let p = deref(p, "posterior")?;
        let x =
            p.0.frames()
                .get(frame)
                .and_then(|f| f.get(s))
                .ok_or_else(|| config_error(format!("no sample {s} of frame {frame}")))?;
        put(out, AidImage(x.clone()))
    })
}

/// Posterior mean of `frame`; with `ci_halfwidth` non-null also writes the
/// 95% half-widths (`rows * cols` doubles). Needs at least two samples.
#[no_mangle]
pub unsafe extern "C" fn aid_posterior_mean(
    p: *const AidPosterior,
    frame: usize,
    out: *mut *mut AidImage,
    ci_halfwidth: *mut f64,
) -> AidStatus {
    guard(|| {
        let p = deref(p, "posterior")?;
        if frame >= p.0.n_frames() {
            return Err(config_error(format!("frame {frame} out of range")).into());
        }
        let map = mmse_and_ci(&p.0, frame)?;
        if !ci_halfwidth.is_null() {
            ptr::copy_nonoverlapping(
                map.ci_halfwidth.as_ptr(),
                ci_halfwidth,
                map.ci_halfwidth.len(),
            );
        }
        put(out, AidImage(map.mean))
    })
}

/// PSNR in dB of `est` against `reference` (infinite when equal).
#[no_mangle]
pub unsafe extern "C" fn aid_psnr(
    reference: *const AidImage,
    est: *const AidImage,
    out: *mut f64,
) -> AidStatus {
    guard(|| {
        let v = psnr(&deref(reference, "reference")?.0, &deref(est, "est")?.0)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn aid_nrmse(
    reference: *const AidImage,
    est: *const AidImage,
    out: *mut f64,
) -> AidStatus {
    guard(|| {
        let v = nrmse(&deref(reference, "reference")?.0, &deref(est, "est")?.0)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = v;
        Ok(())
    })
}
