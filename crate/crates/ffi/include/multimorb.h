#ifndef MULTIMORB_H
#define MULTIMORB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MM_OK 0

#define MM_ERR_NULL 1

#define MM_ERR_CONFIG 2

#define MM_ERR_MODEL 3

#define MM_ERR_DATA 4

#define MM_ERR_PANIC 5

/**
 * Opaque posterior target.
 */
typedef struct MmTarget MmTarget;

/**
 * Summary of an information criterion.
 */
typedef struct MmElpd {
  double elpd;
  double p_eff;
  double se;
  double ic;
  double ic_se;
} MmElpd;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a target from a TOML config and a dataset directory
 * (`respondents.csv`, `locations.csv`, `adjacency.csv`, `distance_<m>.csv`).
 *
 * # Safety
 * `config_path` and `data_dir` must be NUL-terminated strings; `out` must be writable.
 */
int32_t mm_target_new(const char *config_path, const char *data_dir, struct MmTarget **out);

/**
 * Length of the unconstrained parameter vector; 0 for a null handle.
 *
 * # Safety
 * `target` must be null or a live handle from [`mm_target_new`].
 */
size_t mm_target_dim(const struct MmTarget *target);

/**
 * Log posterior at `x` (length `n`). `grad` may be null; otherwise it receives `n` values.
 *
 * # Safety
 * `x` must point to `n` doubles, `value` to one double and `grad`, when not null, to `n` doubles.
 */
int32_t mm_target_log_posterior(const struct MmTarget *target,
                                const double *x,
                                size_t n,
                                double *value,
                                double *grad);

/**
 * Releases a target. Null is ignored.
 *
 * # Safety
 * `target` must be null or a handle from [`mm_target_new`] not freed before.
 */
void mm_target_free(struct MmTarget *target);

/**
 * WAIC of a row-major `draws x points` log-likelihood matrix.
 *
 * # Safety
 * `loglik` must point to `draws * points` doubles and `out` to one `MmElpd`.
 */
int32_t mm_waic(const double *loglik, size_t draws, size_t points, struct MmElpd *out);

/**
 * PSIS-LOO of a row-major `draws x points` matrix. `pareto_k` may be null;
 * otherwise it receives one shape estimate per point.
 *
 * # Safety
 * `loglik` must point to `draws * points` doubles, `out` to one `MmElpd`
 * and `pareto_k`, when not null, to `points` doubles.
 */
int32_t mm_psis_loo(const double *loglik,
                    size_t draws,
                    size_t points,
                    struct MmElpd *out,
                    double *pareto_k);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length plus one, or 0 when
 * there is no error.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t mm_last_error(char *buf, size_t len);

/**
 * Engine version as a static NUL-terminated string.
 */
const char *mm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTIMORB_H */
