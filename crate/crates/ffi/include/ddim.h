/* C interface to ddim-core. Every function returns a DdimStatus; call ddim_last_error() for details. */

#ifndef DDIM_H
#define DDIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdimStatus {
  DDIM_STATUS_OK = 0,
  DDIM_STATUS_NULL_POINTER = 1,
  DDIM_STATUS_PARAMETER = 2,
  DDIM_STATUS_DOMAIN = 3,
  DDIM_STATUS_SHAPE = 4,
  DDIM_STATUS_IO = 5,
  DDIM_STATUS_FORMAT = 6,
  DDIM_STATUS_TRAINING = 7,
  DDIM_STATUS_CONFIG = 8,
  DDIM_STATUS_PANIC = 9,
} DdimStatus;

typedef enum DdimMode {
  DDIM_MODE_LINEAR = 0,
  DDIM_MODE_QUADRATIC = 1,
} DdimMode;

typedef enum DdimPolicyKind {
  /*
   `σ = η·σ_DDPM`; `eta = 0` is deterministic.
   */
  DDIM_POLICY_KIND_ETA = 0,
  /*
   Larger noise scale `σ̂`.
   */
  DDIM_POLICY_KIND_SIGMA_HAT = 1,
} DdimPolicyKind;

/*
 Opaque noise-prediction model.
 */
typedef struct DdimDenoiser DdimDenoiser;

/*
 Opaque noise schedule.
 */
typedef struct DdimSchedule DdimSchedule;

typedef struct DdimPolicy {
  enum DdimPolicyKind kind;
  double eta;
} DdimPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread; empty after a success.
 The pointer stays valid until the next call on the same thread.
 */
const char *ddim_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *ddim_version(void);

/*
 Linear `β` schedule with `steps` timesteps.
 */
enum DdimStatus ddim_schedule_linear(size_t steps,
                                     double beta_start,
                                     double beta_end,
                                     struct DdimSchedule **out);

/*
 Schedule from cumulative `α_0..α_T` (`α_0 = 1` may be omitted).
 */
enum DdimStatus ddim_schedule_from_alphas(const double *alphas,
                                          size_t len,
                                          struct DdimSchedule **out);

enum DdimStatus ddim_schedule_len(const struct DdimSchedule *schedule, size_t *out);

enum DdimStatus ddim_schedule_alpha(const struct DdimSchedule *schedule, size_t t, double *out);

void ddim_schedule_free(struct DdimSchedule *schedule);

/*
 Exact denoiser for an isotropic Gaussian mixture with `k` components in
 `d` dimensions; `means` is `k × d`.
 */
enum DdimStatus ddim_denoiser_mixture(const struct DdimSchedule *schedule,
                                      const double *weights,
                                      size_t k,
                                      const double *means,
                                      size_t d,
                                      double component_std,
                                      struct DdimDenoiser **out);

/*
 Exact denoiser for the empirical distribution of `n` points (`n × d`).
 */
enum DdimStatus ddim_denoiser_points(const struct DdimSchedule *schedule,
                                     const double *points,
                                     size_t n,
                                     size_t d,
                                     struct DdimDenoiser **out);

/*
 Loads a trained network checkpoint; its schedule hash must match `schedule`.
 */
enum DdimStatus ddim_denoiser_load(const struct DdimSchedule *schedule,
                                   const char *path,
                                   struct DdimDenoiser **out);

enum DdimStatus ddim_denoiser_dim(const struct DdimDenoiser *denoiser, size_t *out);

/*
 Noise prediction for `n` states at timestep `t`; `x` and `out` are `n × d`.
 */
enum DdimStatus ddim_denoiser_eval(const struct DdimDenoiser *denoiser,
                                   const double *x,
                                   size_t n,
                                   size_t d,
                                   size_t t,
                                   double *out);

void ddim_denoiser_free(struct DdimDenoiser *denoiser);

/*
 Standard-normal latents for chains `first_chain..first_chain + n`.
 */
enum DdimStatus ddim_draw_latents(const struct DdimSchedule *schedule,
                                  uint64_t seed,
                                  uint64_t first_chain,
                                  size_t n,
                                  size_t d,
                                  double *out);

/*
 Runs `steps` generative transitions from latents `x_t` (`n × d`) to
 samples in `out`. Row `r` uses the noise of chain `first_chain + r`.
 */
enum DdimStatus ddim_sample(const struct DdimSchedule *schedule,
                            const struct DdimDenoiser *denoiser,
                            const double *x_t,
                            size_t n,
                            size_t d,
                            size_t steps,
                            enum DdimMode mode,
                            struct DdimPolicy policy,
                            uint64_t seed,
                            uint64_t first_chain,
                            double *out);

/*
 Deterministic encoding of data `x0` (`n × d`) to latents `x_T` in `out`.
 */
enum DdimStatus ddim_encode(const struct DdimSchedule *schedule,
                            const struct DdimDenoiser *denoiser,
                            const double *x0,
                            size_t n,
                            size_t d,
                            size_t steps,
                            enum DdimMode mode,
                            double *out);

/*
 Deterministic decoding of latents `x_t` (`n × d`) to data in `out`.
 */
enum DdimStatus ddim_decode(const struct DdimSchedule *schedule,
                            const struct DdimDenoiser *denoiser,
                            const double *x_t,
                            size_t n,
                            size_t d,
                            size_t steps,
                            enum DdimMode mode,
                            double *out);

/*
 Spherical interpolation between two `d`-vectors.
 */
enum DdimStatus ddim_slerp(const double *a, const double *b, size_t d, double alpha, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDIM_H */
