#ifndef AID_H
#define AID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call. The nonzero values 2–4 match the
 * exit codes of the `aid` CLI.
 */
typedef enum AidStatus {
  AID_STATUS_OK = 0,
  /**
   * Invalid argument, configuration or dimensions.
   */
  AID_STATUS_CONFIG = 2,
  AID_STATUS_NUMERIC = 3,
  /**
   * File or format error.
   */
  AID_STATUS_IO = 4,
  /**
   * A required pointer was null.
   */
  AID_STATUS_NULL_POINTER = 5,
  /**
   * Internal panic caught at the boundary.
   */
  AID_STATUS_PANIC = 6,
} AidStatus;

/**
 * Noise predictor together with the schedule it runs on.
 */
typedef struct AidDenoiser AidDenoiser;

/**
 * Forward operator `A = P F S`.
 */
typedef struct AidForwardModel AidForwardModel;

/**
 * Complex image.
 */
typedef struct AidImage AidImage;

/**
 * Multi-coil k-space frame.
 */
typedef struct AidKSpace AidKSpace;

/**
 * Posterior samples of a reconstructed sequence.
 */
typedef struct AidPosterior AidPosterior;

/**
 * Noise schedule.
 */
typedef struct AidSchedule AidSchedule;

/**
 * Posterior reconstruction settings.
 */
typedef struct AidReconParams {
  double lambda;
  size_t k_iters;
  size_t samples;
  /**
   * Nonzero re-injects noise after the data-consistency step.
   */
  int32_t noise_inject;
  uint64_t seed;
} AidReconParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL, or
 * 0 when no error has been recorded.
 */
size_t aid_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aid_version(void);

/**
 * Builds an image from `rows * cols` interleaved `(re, im)` pairs.
 */
enum AidStatus aid_image_new(size_t rows,
                             size_t cols,
                             const double *interleaved,
                             struct AidImage **out);

void aid_image_free(struct AidImage *img);

/**
 * Writes the shape of `img`.
 */
enum AidStatus aid_image_shape(const struct AidImage *img, size_t *rows, size_t *cols);

/**
 * Copies the pixels as interleaved `(re, im)` into `out`, which must hold
 * `len >= 2 * rows * cols` doubles.
 */
enum AidStatus aid_image_read(const struct AidImage *img, double *out, size_t len);

/**
 * Unitary 2-D FFT (power-of-two sides).
 */
enum AidStatus aid_fft2(const struct AidImage *img, struct AidImage **out);

enum AidStatus aid_ifft2(const struct AidImage *img, struct AidImage **out);

/**
 * Linear schedule with `steps` steps from `beta_min` to `beta_max`.
 */
enum AidStatus aid_schedule_new(size_t steps,
                                double beta_min,
                                double beta_max,
                                struct AidSchedule **out);

void aid_schedule_free(struct AidSchedule *s);

/**
 * `alpha_bar_t` for `t` in `0..=T` (`alpha_bar_0 = 1`).
 */
enum AidStatus aid_schedule_alpha_bar(const struct AidSchedule *s, size_t t, double *out);

/**
 * Forward operator on `n x n` images. `mask_kind` is one of `random-acs`,
 * `random-noacs`, `equispaced-acs`, `equispaced-noacs`, `odd-lines`,
 * `full`. One coil gives unit sensitivity; more are synthesised from
 * `seed`, which also draws random masks.
 */
enum AidStatus aid_forward_model_new(const char *mask_kind,
                                     size_t n,
                                     double factor,
                                     size_t acs_width,
                                     size_t coils,
                                     double sigma_eta,
                                     uint64_t seed,
                                     struct AidForwardModel **out);

void aid_forward_model_free(struct AidForwardModel *m);

/**
 * `y = A x`.
 */
enum AidStatus aid_forward_apply(const struct AidForwardModel *m,
                                 const struct AidImage *x,
                                 struct AidKSpace **out);

/**
 * `A^H y`.
 */
enum AidStatus aid_adjoint_apply(const struct AidForwardModel *m,
                                 const struct AidKSpace *y,
                                 struct AidImage **out);

/**
 * Adds circular complex noise of standard deviation `sigma` on sampled
 * locations.
 */
enum AidStatus aid_kspace_add_noise(const struct AidForwardModel *m,
                                    struct AidKSpace *y,
                                    double sigma,
                                    uint64_t seed);

void aid_kspace_free(struct AidKSpace *y);

/**
 * Loads a checkpoint directory written by `aid train`.
 */
enum AidStatus aid_denoiser_load(const char *path, struct AidDenoiser **out);

/**
 * Analytic denoiser for the prior `N(mean, var)` per real component.
 */
enum AidStatus aid_denoiser_gaussian(const struct AidImage *mean,
                                     double var,
                                     const struct AidSchedule *sched,
                                     struct AidDenoiser **out);

void aid_denoiser_free(struct AidDenoiser *d);

/**
 * Defaults: `lambda = 1`, `K = 5`, `S = 1`, noise injection on, seed 0.
 */
struct AidReconParams aid_recon_params_default(void);

/**
 * Reconstructs `n_frames` k-space frames in order, conditioning the first on
 * `x0`.
 */
enum AidStatus aid_reconstruct(const struct AidDenoiser *d,
                               const struct AidForwardModel *m,
                               const struct AidKSpace *const *kspace,
                               size_t n_frames,
                               const struct AidImage *x0,
                               struct AidReconParams params,
                               struct AidPosterior **out);

void aid_posterior_free(struct AidPosterior *p);

/**
 * Sample `s` of frame `frame`.
 */
enum AidStatus aid_posterior_sample(const struct AidPosterior *p,
                                    size_t frame,
                                    size_t s,
                                    struct AidImage **out);

/**
 * Posterior mean of `frame`; with `ci_halfwidth` non-null also writes the
 * 95% half-widths (`rows * cols` doubles). Needs at least two samples.
 */
enum AidStatus aid_posterior_mean(const struct AidPosterior *p,
                                  size_t frame,
                                  struct AidImage **out,
                                  double *ci_halfwidth);

/**
 * PSNR in dB of `est` against `reference` (infinite when equal).
 */
enum AidStatus aid_psnr(const struct AidImage *reference, const struct AidImage *est, double *out);

enum AidStatus aid_nrmse(const struct AidImage *reference, const struct AidImage *est, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AID_H */
