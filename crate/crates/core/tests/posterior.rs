// With an identity operator and a Gaussian oracle prior every reverse step of
// the reconstruction chain is the same affine map on each pixel, so the chain
// can be replayed in scalar arithmetic and its law propagated exactly.

use aid_core::denoiser::{GaussianOracle, GaussianPriorSpec};
use aid_core::diffusion::{make_schedule, NoiseSchedule};
use aid_core::mri::{apply_forward, ForwardModel};
use aid_core::numerics::ifft2;
use aid_core::sampler::{reconstruct, NoiseScale, ReconConfig};
use aid_core::{ComplexArray2D, RngStream};
use num_complex::Complex64;

struct Setup {
    n: usize,
    mu: ComplexArray2D,
    var: f64,
    sigma_eta: f64,
    sched: NoiseSchedule,
    fwd: ForwardModel,
    ys: Vec<aid_core::mri::KSpaceFrame>,
    y_imgs: Vec<ComplexArray2D>,
}

fn setup(n: usize, frames: usize, seed: u64) -> Setup {
    let mut rng = RngStream::new(seed, 0);
    let mu = rng.normal_array(n, n).map(|z| z * 0.5);
    let (var, sigma_eta) = (0.4, 0.8);
    let sched = make_schedule(30, 1e-3, 0.3).unwrap();
    let fwd = ForwardModel::identity(n).with_sigma_eta(sigma_eta).unwrap();
    let mut ys = Vec::new();
    let mut y_imgs = Vec::new();
    for _ in 0..frames {
        let x = rng.normal_array(n, n);
        let y = apply_forward(&fwd, &x).unwrap();
        y_imgs.push(ifft2(&y.coils()[0]).unwrap());
        ys.push(y);
    }
    Setup {
        n,
        mu,
        var,
        sigma_eta,
        sched,
        fwd,
        ys,
        y_imgs,
    }
}

/// One reverse step (oracle epsilon, DDIM, K data steps) on a scalar.
fn step(
    x: Complex64,
    mu: Complex64,
    y: Complex64,
    t: usize,
    s: &Setup,
    cfg: &ReconConfig,
) -> Complex64 {
    let ab = s.sched.alpha_bar(t);
    let ab_prev = s.sched.alpha_bar(t - 1);
    let eps = (x - mu * ab.sqrt()) * (1.0 - ab).sqrt() / (ab * s.var + 1.0 - ab);
    let x0 = (x - eps * (1.0 - ab).sqrt()) / ab.sqrt();
    let mut x = x0 * ab_prev.sqrt() + eps * (1.0 - ab_prev).sqrt();
    for _ in 0..cfg.k_iters {
        x += (y - x) * (cfg.lambda / (s.sigma_eta * s.sigma_eta));
    }
    x
}

#[test]
fn chains_without_injection_follow_the_scalar_recursion() {
    let s = setup(8, 2, 1);
    let cfg = ReconConfig {
        lambda: 0.3,
        k_iters: 3,
        samples: 3,
        noise_inject: false,
        ..ReconConfig::default()
    };
    let oracle = GaussianOracle::new(
        GaussianPriorSpec::isotropic(s.mu.clone(), s.var).unwrap(),
        s.sched.clone(),
    );
    let rng = RngStream::new(9, 0);
    let x0 = ComplexArray2D::zeros(s.n, s.n);
    let post = reconstruct(&oracle, &s.fwd, &s.ys, &x0, &cfg, &s.sched, &rng).unwrap();
    for chain in 0..cfg.samples {
        let mut r = rng.split(chain as u64);
        for (f, y_img) in s.y_imgs.iter().enumerate() {
            let start = r.normal_array(s.n, s.n);
            let got = &post.frame(f)[chain];
            for i in 0..s.n * s.n {
                let mut x = start.data()[i];
                for t in (1..=s.sched.steps()).rev() {
                    x = step(x, s.mu.data()[i], y_img.data()[i], t, &s, &cfg);
                }
                let d = (x - got.data()[i]).norm();
                assert!(d < 1e-10, "frame {f} chain {chain} pixel {i}: off by {d:e}");
            }
        }
    }
}

#[test]
fn injected_chains_match_the_propagated_gaussian_law() {
    let s = setup(4, 1, 2);
    for scale in [NoiseScale::Cumulative, NoiseScale::PerStep] {
        let cfg = ReconConfig {
            lambda: 0.2,
            k_iters: 2,
            samples: 3000,
            noise_inject: true,
            noise_scale: scale,
        };
        let oracle = GaussianOracle::new(
            GaussianPriorSpec::isotropic(s.mu.clone(), s.var).unwrap(),
            s.sched.clone(),
        );
        let post = reconstruct(
            &oracle,
            &s.fwd,
            &s.ys,
            &s.mu,
            &cfg,
            &s.sched,
            &RngStream::new(3, 0),
        )
        .unwrap();
        let samples = post.frame(0);
        let count = samples.len() as f64;
        for i in 0..s.n * s.n {
            let (mu, y) = (s.mu.data()[i], s.y_imgs[0].data()[i]);
            // mean follows the map, per-component variance its slope squared
            let (mut m, mut v) = (Complex64::new(0.0, 0.0), 1.0);
            for t in (1..=s.sched.steps()).rev() {
                let slope = (step(Complex64::new(1.0, 0.0), mu, y, t, &s, &cfg)
                    - step(Complex64::new(0.0, 0.0), mu, y, t, &s, &cfg))
                .re;
                m = step(m, mu, y, t, &s, &cfg);
                v *= slope * slope;
                if t > 1 {
                    v += match scale {
                        NoiseScale::Cumulative => 1.0 - s.sched.alpha_bar(t - 1),
                        NoiseScale::PerStep => 1.0 - s.sched.alpha(t - 1),
                    };
                }
            }
            let emp: Complex64 = samples.iter().map(|x| x.data()[i]).sum::<Complex64>() / count;
            let (mut vr, mut vi) = (0.0, 0.0);
            for x in samples {
                let d = x.data()[i] - emp;
                vr += d.re * d.re / (count - 1.0);
                vi += d.im * d.im / (count - 1.0);
            }
            let se = (v / count).sqrt();
            assert!(
                (emp.re - m.re).abs() < 4.5 * se,
                "{scale:?} pixel {i}: mean {} vs {}",
                emp.re,
                m.re
            );
            assert!(
                (emp.im - m.im).abs() < 4.5 * se,
                "{scale:?} pixel {i}: mean {} vs {}",
                emp.im,
                m.im
            );
            // sample variance has relative s.e. sqrt(2 / S)
            for got in [vr, vi] {
                assert!(
                    (got / v - 1.0).abs() < 5.0 * (2.0 / count).sqrt(),
                    "{scale:?} pixel {i}: var {got} vs {v}"
                );
            }
        }
    }
}
