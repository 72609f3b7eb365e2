#ifndef CENSIDX_H
#define CENSIDX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Input and numerical failures match the command-line exit
// codes.
typedef enum CensidxStatus {
  CENSIDX_STATUS_OK = 0,
  CENSIDX_STATUS_NULL_POINTER = 1,
  CENSIDX_STATUS_INVALID_INPUT = 2,
  CENSIDX_STATUS_NUMERICAL = 3,
  CENSIDX_STATUS_INTERNAL = 4,
  CENSIDX_STATUS_PANIC = 5,
} CensidxStatus;

// Opaque fitted model.
typedef struct CensidxFit CensidxFit;

// Opaque censored sample.
typedef struct CensidxSample CensidxSample;

// Scalar summaries of a fit.
typedef struct CensidxFitScalars {
  double h_hat;
  double tau_hat;
  double tau0;
  double e2;
  double e2_sandwich;
  double loglik;
  size_t n_retained;
  double weight_inf;
  double weight_tau;
} CensidxFitScalars;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into the library on this thread.
const char *censidx_last_error_message(void);

// Builds a sample from `n` times, `n` flags (nonzero = uncensored) and an
// `n × d` row-major covariate matrix.
//
// # Safety
// `z` and `delta` must point to `n` elements, `x` to `n * d` elements, and
// `out` must be writable.
enum CensidxStatus censidx_sample_new(const double *z,
                                      const uint8_t *delta,
                                      const double *x,
                                      size_t n,
                                      size_t d,
                                      struct CensidxSample **out);

// # Safety
// `sample` must come from [`censidx_sample_new`] and not be used afterwards.
void censidx_sample_free(struct CensidxSample *sample);

// Kaplan-Meier jump weights in input order; `out` holds `len >= n` values.
//
// # Safety
// `sample` must be a live handle and `out` must hold `len` values.
enum CensidxStatus censidx_km_weights(const struct CensidxSample *sample, double *out, size_t len);

// The fourth-order kernel (`order` 0) or its first or second derivative.
//
// # Safety
// `out` must be writable.
enum CensidxStatus censidx_kernel_eval(double u, uint8_t order, double *out);

// Fits the model. `config_toml` is a TOML fit configuration or null for
// the defaults.
//
// # Safety
// `sample` must be a live handle, `config_toml` null or a NUL-terminated
// string, and `out` writable.
enum CensidxStatus censidx_fit(const struct CensidxSample *sample,
                               const char *config_toml,
                               struct CensidxFit **out);

// # Safety
// `fit` must come from [`censidx_fit`] and not be used afterwards.
void censidx_fit_free(struct CensidxFit *fit);

// Dimension `d` of the index coefficient; 0 for a null handle.
//
// # Safety
// `fit` must be null or a live handle.
size_t censidx_fit_dim(const struct CensidxFit *fit);

// Estimated index coefficient, `d` values with the first equal to one.
//
// # Safety
// `fit` must be a live handle and `out` must hold `len` values.
enum CensidxStatus censidx_fit_theta(const struct CensidxFit *fit, double *out, size_t len);

// Standard errors of the `d - 1` free coefficients.
//
// # Safety
// `fit` must be a live handle and `out` must hold `len` values.
enum CensidxStatus censidx_fit_standard_errors(const struct CensidxFit *fit,
                                               double *out,
                                               size_t len);

// # Safety
// `fit` must be a live handle and `out` writable.
enum CensidxStatus censidx_fit_scalars(const struct CensidxFit *fit, struct CensidxFitScalars *out);

// The full fit as a JSON document. Release it with [`censidx_string_free`].
//
// # Safety
// `fit` must be a live handle and `out` writable.
enum CensidxStatus censidx_fit_to_json(const struct CensidxFit *fit, char **out);

// # Safety
// `s` must come from this library and not be used afterwards.
void censidx_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CENSIDX_H */
