/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef MINBRIDGE_H
#define MINBRIDGE_H

#include <stddef.h>
#include <stdint.h>

// Result code of every exported function.
typedef enum MbStatus {
  MbStatus_Ok = 0,
  MbStatus_NullPointer = 1,
  // Malformed input data, configuration or argument.
  MbStatus_InvalidArgument = 2,
  // The data were well formed but the estimator could not be computed.
  MbStatus_EstimationFailed = 3,
  MbStatus_BufferTooSmall = 4,
  // A Rust panic was caught at the boundary.
  MbStatus_Panic = 5,
} MbStatus;

// Estimator selector; pass one of these values as the `method` argument.
typedef enum MbMethod {
  MbMethod_Did = 0,
  MbMethod_Horizontal = 1,
  MbMethod_Vertical = 2,
  MbMethod_Factor4step = 3,
  MbMethod_BridgeIdentity = 4,
  MbMethod_BridgeTwoStage = 5,
  MbMethod_BridgePopulation = 6,
} MbMethod;

// Opaque estimate handle.
typedef struct MbEstimate MbEstimate;

// Opaque panel handle.
typedef struct MbPanel MbPanel;

// Tuning parameters. The penalty is `lambda_c * N^(-lambda_beta)`.
typedef struct MbOptions {
  double lambda_c;
  double lambda_beta;
  // Confidence intervals have level `1 - rho`.
  double rho;
  // Ridge penalty for the horizontal regression.
  double ridge;
  // Rank for the four-step factor estimator.
  uintptr_t factor_rank;
} MbOptions;

// Scalar results. Fields an estimator does not produce are NaN.
typedef struct MbSummary {
  double estimate;
  double sigma2_hat;
  double ci_lower;
  double ci_upper;
  double lambda;
  // Length of the bridge coefficient vector, 0 for baselines.
  uintptr_t theta_len;
} MbSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mb_version(void);

// Message of the last failure on this thread, or an empty string. The
// pointer stays valid until the next failing call on the same thread.
const char *mb_last_error_message(void);

// Default tuning parameters.
struct MbOptions mb_options_default(void);

// Builds a panel from dense arrays.
//
// `outcomes` is row-major `n_units x (n_pre + 1 + n_post)`: pre periods
// oldest first, then the target period, then the post periods.
// `treated` holds one 0/1 flag per unit. `covariates` is row-major
// `n_units x n_cov` and may be null when `n_cov` is 0.
//
// # Safety
// Pointers must be valid for the stated lengths; `out` must be writable.
enum MbStatus mb_panel_from_arrays(uintptr_t n_units,
                                   uintptr_t n_pre,
                                   uintptr_t n_post,
                                   const double *outcomes,
                                   const uint8_t *treated,
                                   uintptr_t n_cov,
                                   const double *covariates,
                                   struct MbPanel **out);

// Loads a long-format CSV panel with columns `unit`, `time`, `y`, `a`
// (0/1 treatment) and optional covariates `x1`, `x2`, ...
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum MbStatus mb_panel_load_csv(const char *path, struct MbPanel **out);

// Draws a synthetic panel from a TOML data-generating configuration.
//
// # Safety
// `config_toml` must be a NUL-terminated string; `out` must be writable.
enum MbStatus mb_panel_simulate(const char *config_toml, uint64_t seed, struct MbPanel **out);

// Writes the panel dimensions. Any output pointer may be null.
//
// # Safety
// `panel` must come from this library; non-null outputs must be writable.
enum MbStatus mb_panel_dims(const struct MbPanel *panel,
                            uintptr_t *n_units,
                            uintptr_t *n_pre,
                            uintptr_t *n_post,
                            uintptr_t *n_treated);

// Releases a panel. Null is a no-op.
//
// # Safety
// `panel` must come from this library and not be used afterwards.
void mb_panel_free(struct MbPanel *panel);

// Runs one estimator on the panel. `options` may be null for defaults.
//
// # Safety
// `panel` must come from this library; `out` must be writable.
enum MbStatus mb_estimate(const struct MbPanel *panel,
                          uint32_t method,
                          const struct MbOptions *options,
                          struct MbEstimate **out);

// Writes the scalar results.
//
// # Safety
// `est` must come from this library; `out` must be writable.
enum MbStatus mb_estimate_summary(const struct MbEstimate *est, struct MbSummary *out);

// Copies the stacked bridge coefficients into `buf`. `len_out` always
// receives the full length; `BufferTooSmall` is returned when `cap` is
// short, in which case nothing is copied. Baselines have length 0.
//
// # Safety
// `buf` must be writable for `cap` values (or null when `cap` is 0).
enum MbStatus mb_estimate_theta(const struct MbEstimate *est,
                                double *buf,
                                uintptr_t cap,
                                uintptr_t *len_out);

// Copies the JSON summary, NUL-terminated, into `buf`. `len_out` always
// receives the string length without the terminator; `BufferTooSmall`
// is returned when `cap` cannot hold it plus the terminator.
//
// # Safety
// `buf` must be writable for `cap` bytes (or null when `cap` is 0).
enum MbStatus mb_estimate_json(const struct MbEstimate *est,
                               char *buf,
                               uintptr_t cap,
                               uintptr_t *len_out);

// Releases an estimate. Null is a no-op.
//
// # Safety
// `est` must come from this library and not be used afterwards.
void mb_estimate_free(struct MbEstimate *est);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MINBRIDGE_H */
