/* C interface to the deconfound library. */

#ifndef DECONFOUND_H
#define DECONFOUND_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirrored by every entry point.
 */
typedef enum DcStatus {
  DC_OK = 0,
  DC_INVALID_INPUT = 1,
  DC_DEGENERATE = 2,
  DC_INSTABILITY = 3,
  DC_PARSE = 4,
  DC_CONFIG = 5,
  DC_NULL_POINTER = 6,
  DC_PANIC = 7,
} DcStatus;

/**
 * Opaque fitted model handle.
 */
typedef struct DcFit DcFit;

/**
 * One coordinate's confidence interval from the doubly debiased Lasso.
 */
typedef struct DcInference {
  double estimate;
  double se;
  double ci_low;
  double ci_high;
  double p_value;
} DcInference;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL terminated,
 * truncated to `cap`); returns the full message length in bytes.
 */
uintptr_t dc_last_error(char *buf, uintptr_t cap);

/**
 * Trim-transform Lasso. `x` is row-major `n * p`; `tau <= 0` selects the
 * median singular value. With `use_cv` non-zero, `lambda` is ignored and
 * chosen by cross-validation seeded from `seed`.
 */
enum DcStatus dc_trim_lasso(const double *x,
                            uintptr_t n,
                            uintptr_t p,
                            const double *y,
                            double tau,
                            double lambda,
                            int32_t use_cv,
                            uint64_t seed,
                            struct DcFit **out);

/**
 * PCA-adjustment Lasso removing the `qhat` leading singular directions.
 */
enum DcStatus dc_pca_lasso(const double *x,
                           uintptr_t n,
                           uintptr_t p,
                           const double *y,
                           uintptr_t qhat,
                           double lambda,
                           int32_t use_cv,
                           uint64_t seed,
                           struct DcFit **out);

/**
 * Lava sparse-plus-dense fit; `lambda2 <= 0` selects the median rule.
 */
enum DcStatus dc_lava(const double *x,
                      uintptr_t n,
                      uintptr_t p,
                      const double *y,
                      double lambda1,
                      double lambda2,
                      struct DcFit **out);

/**
 * Number of coefficients held by a fit handle.
 */
uintptr_t dc_fit_dim(const struct DcFit *fit);

/**
 * Copy the sparse coefficients into `out` (length `dc_fit_dim`).
 */
enum DcStatus dc_fit_beta(const struct DcFit *fit, double *out, uintptr_t len);

/**
 * Copy the dense part (Lava only) into `out`.
 */
enum DcStatus dc_fit_dense_part(const struct DcFit *fit, double *out, uintptr_t len);

double dc_fit_intercept(const struct DcFit *fit);

/**
 * The l1 penalty the fit was solved at (after any cross-validation).
 */
double dc_fit_lambda(const struct DcFit *fit);

void dc_fit_free(struct DcFit *fit);

/**
 * Anchor regression. `a` is row-major `n * r`. A non-zero `infinite`
 * requests the lexicographic limit and ignores `gamma`; `beta_out` must
 * hold `p` doubles; `objective_out` may be null.
 */
enum DcStatus dc_anchor_fit(const double *x,
                            uintptr_t n,
                            uintptr_t p,
                            const double *y,
                            const double *a,
                            uintptr_t r,
                            double gamma,
                            int32_t infinite,
                            double lambda,
                            double *beta_out,
                            double *objective_out);

/**
 * Doubly debiased Lasso for coordinate `j` with Trim transforms and
 * cross-validated penalties seeded from `seed`.
 */
enum DcStatus dc_dd_lasso(const double *x,
                          uintptr_t n,
                          uintptr_t p,
                          const double *y,
                          uintptr_t j,
                          double level,
                          uint64_t seed,
                          struct DcInference *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DECONFOUND_H */
