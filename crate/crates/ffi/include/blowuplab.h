/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef BLOWUPLAB_H
#define BLOWUPLAB_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Joseph-Lundgren class of `(n, q)`.
 */
typedef enum {
  BLX_CLASS_SUBCRITICAL = 0,
  BLX_CLASS_CRITICAL = 1,
  BLX_CLASS_SUPERCRITICAL = 2,
} BlxClass;

/**
 * Result of a call.
 */
typedef enum {
  BLX_STATUS_OK = 0,
  BLX_STATUS_NULL_POINTER = 1,
  BLX_STATUS_INVALID_ARGUMENT = 2,
  /**
   * `(n, q)` is not in the supercritical range the call needs.
   */
  BLX_STATUS_NOT_SUPERCRITICAL = 3,
  BLX_STATUS_NON_CONVERGENCE = 4,
  BLX_STATUS_RESOLUTION = 5,
  /**
   * Any other numerical failure (singular systems, positivity loss, ...).
   */
  BLX_STATUS_NUMERICAL = 6,
  BLX_STATUS_OUT_OF_RANGE = 7,
  BLX_STATUS_PANIC = 8,
} BlxStatus;

typedef struct BlxEigensystem BlxEigensystem;

typedef struct BlxModel BlxModel;

typedef struct BlxTrajectory BlxTrajectory;

typedef struct {
  double k;
  double c_h;
  /**
   * A `BlxClass` value.
   */
  int32_t jl_class;
  double kappa1;
  /**
   * NaN unless supercritical.
   */
  double mu1;
  double gamma;
} BlxClassification;

typedef struct {
  uint32_t i;
  uint32_t j;
  double kappa;
  double lambda;
  double radial_exponent;
} BlxMode;

typedef struct {
  uint32_t ell;
  uint32_t pi_len;
  double m;
  double gamma;
  double mu1;
  double lambda_star;
  double omega;
  double s1;
  double alpha;
  double m0;
  double d_ball;
  /**
   * Growth rate `m omega` of the sup norm.
   */
  double target_rate;
} BlxFrame;

/**
 * Grid and stepping overrides; zero fields take the library defaults.
 */
typedef struct {
  double horizon;
  double dt;
  uint32_t ntheta;
  bool stop_on_exit;
} BlxRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *blx_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *blx_version(void);

/**
 * `K`, `c_H`, class and the first angular eigenvalue for `(n, q)`.
 */
BlxStatus blx_classify(uint32_t n, double q, BlxClassification *out);

/**
 * Eigenvalue inventory with at least `min_modes` modes.
 */
BlxStatus blx_eigensystem_new(uint32_t n, double q, uint32_t min_modes, BlxEigensystem **out);

void blx_eigensystem_free(BlxEigensystem *h);

BlxStatus blx_eigensystem_len(const BlxEigensystem *h, size_t *len);

/**
 * Mode `index` in increasing order of `lambda`.
 */
BlxStatus blx_eigensystem_mode(const BlxEigensystem *h, size_t index, BlxMode *out);

/**
 * Spectral frame, stationary solution and calibration for `(n, q)` with the
 * default parameters.
 */
BlxStatus blx_model_new(uint32_t n, double q, BlxModel **out);

void blx_model_free(BlxModel *h);

BlxStatus blx_model_frame(const BlxModel *h, BlxFrame *out);

/**
 * Evolve the constructed initial data with coefficients `d[0..d_len]`
 * (one per unstable mode) from `s1` to `s_end`. `opts` may be NULL.
 */
BlxStatus blx_simulate(const BlxModel *model,
                       const double *d,
                       size_t d_len,
                       double s_end,
                       const BlxRunOptions *opts,
                       BlxTrajectory **out);

/**
 * Solve `P(d; s2) = 0`; writes `d*` into `d_out[0..d_len]`.
 */
BlxStatus blx_shoot(const BlxModel *model,
                    double s2,
                    const BlxRunOptions *opts,
                    double *d_out,
                    size_t d_len);

void blx_trajectory_free(BlxTrajectory *h);

BlxStatus blx_trajectory_len(const BlxTrajectory *h, size_t *len);

/**
 * Time and sup norm of output point `index`.
 */
BlxStatus blx_trajectory_point(const BlxTrajectory *h, size_t index, double *s, double *sup);

/**
 * Whether the run left the region; the exit time goes to `exit_s`.
 */
BlxStatus blx_trajectory_exit(const BlxTrajectory *h, bool *exited, double *exit_s);

/**
 * Least-squares growth rate of `log sup` over the part of the run that
 * stayed in the region.
 */
BlxStatus blx_trajectory_rate(const BlxTrajectory *h,
                              const BlxModel *model,
                              double *slope,
                              double *stderr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOWUPLAB_H */
