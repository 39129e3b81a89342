use std::ffi::{c_char, CStr};
use std::path::Path;
use std::process::Command;
use std::ptr;

use aid_ffi::*;

fn image(rows: usize, cols: usize, f: impl Fn(usize) -> (f64, f64)) -> *mut AidImage {
    let buf: Vec<f64> = (0..rows * cols)
        .flat_map(|i| {
            let (re, im) = f(i);
            [re, im]
        })
        .collect();
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { aid_image_new(rows, cols, buf.as_ptr(), &mut out) },
        AidStatus::Ok
    );
    out
}

fn read(img: *const AidImage) -> Vec<f64> {
    let (mut r, mut c) = (0, 0);
    unsafe {
        assert_eq!(aid_image_shape(img, &mut r, &mut c), AidStatus::Ok);
        let mut buf = vec![0.0; 2 * r * c];
        assert_eq!(
            aid_image_read(img, buf.as_mut_ptr(), buf.len()),
            AidStatus::Ok
        );
        buf
    }
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    let n = unsafe { aid_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_str()
        .unwrap()
        .to_owned()
}

#[test]
fn fft_of_delta_is_flat() {
    let x = image(4, 4, |i| if i == 0 { (1.0, 0.0) } else { (0.0, 0.0) });
    let mut k = ptr::null_mut();
    unsafe {
        assert_eq!(aid_fft2(x, &mut k), AidStatus::Ok);
        for pair in read(k).chunks(2) {
            assert!((pair[0] - 0.25).abs() < 1e-15 && pair[1].abs() < 1e-15);
        }
        let mut back = ptr::null_mut();
        assert_eq!(aid_ifft2(k, &mut back), AidStatus::Ok);
        assert_eq!(read(back)[0], 1.0);
        aid_image_free(back);
        aid_image_free(k);
        aid_image_free(x);
    }
}

#[test]
fn errors_map_to_status_and_message() {
    let x = image(3, 4, |_| (1.0, 0.0));
    let mut k = ptr::null_mut();
    unsafe {
        assert_eq!(aid_fft2(x, &mut k), AidStatus::Config);
        assert!(k.is_null());
        assert!(last_error().contains("power"), "{}", last_error());
        assert_eq!(aid_fft2(ptr::null(), &mut k), AidStatus::NullPointer);
        assert!(last_error().contains("img"));
        let mut s = ptr::null_mut();
        assert_eq!(aid_schedule_new(10, 0.2, 0.1, &mut s), AidStatus::Config);
        aid_image_free(x);
        // freeing null is a no-op
        aid_image_free(ptr::null_mut());
    }
}

#[test]
fn truncated_error_buffer_is_terminated() {
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(aid_schedule_new(0, 0.1, 0.2, &mut s), AidStatus::Config);
        let mut buf = [1 as c_char; 8];
        let n = aid_last_error(buf.as_mut_ptr(), buf.len());
        assert!(n > 7);
        assert_eq!(buf[7], 0);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), 7);
    }
}

#[test]
fn adjoint_identity_through_handles() {
    let n = 16;
    let mut m = ptr::null_mut();
    let kind = c"random-acs";
    unsafe {
        assert_eq!(
            aid_forward_model_new(kind.as_ptr(), n, 4.0, 2, 4, 1.0, 9, &mut m),
            AidStatus::Ok
        );
        let x = image(n, n, |i| ((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()));
        let mut y = ptr::null_mut();
        assert_eq!(aid_forward_apply(m, x, &mut y), AidStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(aid_adjoint_apply(m, y, &mut back), AidStatus::Ok);
        // <x, A^H A x> = |Ax|^2: real, and at most |x|^2 for a masked,
        // sum-of-squares-normalised operator
        let (xv, bv) = (read(x), read(back));
        let re: f64 = xv
            .chunks(2)
            .zip(bv.chunks(2))
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1])
            .sum();
        let im: f64 = xv
            .chunks(2)
            .zip(bv.chunks(2))
            .map(|(a, b)| a[0] * b[1] - a[1] * b[0])
            .sum();
        let norm: f64 = xv.iter().map(|v| v * v).sum();
        assert!(re > 0.0 && re <= norm * (1.0 + 1e-12), "{re} vs {norm}");
        assert!(im.abs() < 1e-12 * norm);
        aid_kspace_free(y);
        aid_image_free(back);
        aid_image_free(x);
        aid_forward_model_free(m);
        let bad = c"spiral";
        assert_eq!(
            aid_forward_model_new(bad.as_ptr(), n, 4.0, 2, 1, 1.0, 9, &mut m),
            AidStatus::Config
        );
    }
}

#[test]
fn gaussian_reconstruction_and_metrics() {
    let n = 8;
    unsafe {
        let mut sched = ptr::null_mut();
        assert_eq!(aid_schedule_new(20, 1e-3, 0.2, &mut sched), AidStatus::Ok);
        let mut ab = 0.0;
        assert_eq!(aid_schedule_alpha_bar(sched, 0, &mut ab), AidStatus::Ok);
        assert_eq!(ab, 1.0);
        let mean = image(n, n, |_| (0.0, 0.0));
        let mut den = ptr::null_mut();
        assert_eq!(
            aid_denoiser_gaussian(mean, 1.0, sched, &mut den),
            AidStatus::Ok
        );
        let mut m = ptr::null_mut();
        assert_eq!(
            aid_forward_model_new(c"full".as_ptr(), n, 1.0, 0, 1, 1.0, 0, &mut m),
            AidStatus::Ok
        );
        let truth = image(n, n, |i| (0.5 + 0.01 * i as f64, 0.0));
        let mut y = ptr::null_mut();
        assert_eq!(aid_forward_apply(m, truth, &mut y), AidStatus::Ok);
        assert_eq!(aid_kspace_add_noise(m, y, 0.01, 1), AidStatus::Ok);
        let mut p = aid_recon_params_default();
        p.samples = 4;
        p.seed = 3;
        let frames = [y as *const AidKSpace];
        let mut post = ptr::null_mut();
        assert_eq!(
            aid_reconstruct(den, m, frames.as_ptr(), 1, mean, p, &mut post),
            AidStatus::Ok
        );
        let mut est = ptr::null_mut();
        let mut ci = vec![-1.0; n * n];
        assert_eq!(
            aid_posterior_mean(post, 0, &mut est, ci.as_mut_ptr()),
            AidStatus::Ok
        );
        assert!(ci.iter().all(|&c| c >= 0.0));
        let (mut ps, mut e) = (0.0, 0.0);
        assert_eq!(aid_psnr(truth, est, &mut ps), AidStatus::Ok);
        assert_eq!(aid_nrmse(truth, est, &mut e), AidStatus::Ok);
        assert!(ps.is_finite() && e.is_finite() && e >= 0.0);
        let mut s0 = ptr::null_mut();
        assert_eq!(aid_posterior_sample(post, 0, 3, &mut s0), AidStatus::Ok);
        assert_eq!(aid_posterior_sample(post, 0, 4, &mut s0), AidStatus::Config);
        assert_eq!(
            aid_posterior_mean(post, 1, &mut est, ptr::null_mut()),
            AidStatus::Config
        );
        aid_image_free(s0);
        aid_image_free(est);
        aid_posterior_free(post);
        aid_kspace_free(y);
        aid_image_free(truth);
        aid_forward_model_free(m);
        aid_denoiser_free(den);
        aid_image_free(mean);
        aid_schedule_free(sched);
    }
}

#[test]
fn missing_checkpoint_is_io() {
    let mut d = ptr::null_mut();
    let status = unsafe { aid_denoiser_load(c"/nonexistent/ckpt".as_ptr(), &mut d) };
    assert_eq!(status, AidStatus::Io);
    assert!(d.is_null());
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(aid_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_api_and_parses_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/aid.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "aid_image_new",
        "aid_reconstruct",
        "aid_last_error",
        "AID_STATUS_NULL_POINTER",
    ] {
        assert!(text.contains(name), "{name} missing from aid.h");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"aid.h\"\nint main(void) { AidImage *x = 0; AidStatus s = aid_fft2(x, &x); return s == AID_STATUS_OK; }\n",
    )
    .unwrap();
    // skip quietly when no C compiler is installed
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    else {
        return;
    };
    assert!(status.success());
}
