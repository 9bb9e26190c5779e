#ifndef ESIGAL_H
#define ESIGAL_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible entry point.
typedef enum EsigalStatus {
  ESIGAL_STATUS_OK = 0,
  ESIGAL_STATUS_NULL_POINTER = 1,
  ESIGAL_STATUS_INVALID_ARGUMENT = 2,
  ESIGAL_STATUS_SHAPE_MISMATCH = 3,
  ESIGAL_STATUS_FILTER_DESIGN = 4,
  ESIGAL_STATUS_SIGNAL_TOO_SHORT = 5,
  ESIGAL_STATUS_SINGULAR_MATRIX = 6,
  ESIGAL_STATUS_CHANNEL_MISMATCH = 7,
  ESIGAL_STATUS_NUMERIC_ERROR = 8,
  ESIGAL_STATUS_INTERNAL_ERROR = 9,
} EsigalStatus;

// Opaque zero-phase FIR filter handle.
typedef struct EsigalFir EsigalFir;

// Opaque sLORETA inverse-operator handle.
typedef struct EsigalInverse EsigalInverse;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static description of a status code.
const char *esigal_status_message(enum EsigalStatus status);

// Library version string.
const char *esigal_version(void);

// Design a Hamming windowed-sinc band-pass (see the library docs for the
// tap-count rule). The handle must be released with `esigal_fir_free`.
//
// # Safety
// `out` must point to writable storage for one pointer.
enum EsigalStatus esigal_fir_bandpass(double f_lo,
                                      double f_hi,
                                      double fs,
                                      double transition_bw,
                                      struct EsigalFir **out);

// Design a Hamming windowed-sinc low-pass.
//
// # Safety
// `out` must point to writable storage for one pointer.
enum EsigalStatus esigal_fir_lowpass(double cutoff,
                                     double fs,
                                     double transition_bw,
                                     struct EsigalFir **out);

// Number of taps, or 0 for a null handle.
//
// # Safety
// `fir` must be null or a live handle from a designer.
size_t esigal_fir_num_taps(const struct EsigalFir *fir);

// Copy the taps into `buf` (`len` must be at least the tap count).
//
// # Safety
// `buf` must point to at least `len` writable doubles.
enum EsigalStatus esigal_fir_taps(const struct EsigalFir *fir, double *buf, size_t len);

// Zero-phase (forward-backward) filtering of one signal, in place.
//
// # Safety
// `data` must point to `len` readable and writable doubles.
enum EsigalStatus esigal_fir_filtfilt(const struct EsigalFir *fir, double *data, size_t len);

// Release a filter handle (null is a no-op).
//
// # Safety
// `fir` must be null or a live handle; it is invalid afterwards.
void esigal_fir_free(struct EsigalFir *fir);

// Common average reference, in place on a row-major channels x samples
// matrix.
//
// # Safety
// `data` must point to `channels * samples` readable/writable doubles.
enum EsigalStatus esigal_car(double *data, size_t channels, size_t samples);

// Per-row z-score (sample standard deviation), in place.
//
// # Safety
// `data` must point to `rows * cols` readable/writable doubles.
enum EsigalStatus esigal_zscore_rows(double *data, size_t rows, size_t cols);

// Per-row min-max scaling onto [0, 1], in place.
//
// # Safety
// `data` must point to `rows * cols` readable/writable doubles.
enum EsigalStatus esigal_minmax_rows(double *data, size_t rows, size_t cols);

// Pearson correlation of two equal-length series.
//
// # Safety
// `x` and `y` must point to `len` doubles, `out` to one double.
enum EsigalStatus esigal_pcc(const double *x, const double *y, size_t len, double *out);

// One-tailed paired t-test (alternative: mean(a) > mean(b)).
//
// # Safety
// `a` and `b` must point to `len` doubles; `out_t`/`out_p` to one double each.
enum EsigalStatus esigal_paired_t_test(const double *a,
                                       const double *b,
                                       size_t len,
                                       double *out_t,
                                       double *out_p);

// Build a standardized inverse operator from a row-major channels x
// sources gain matrix with an identity noise covariance.
//
// # Safety
// `gain` must point to `channels * sources` doubles; `out` to one pointer.
enum EsigalStatus esigal_inverse_build(const double *gain,
                                       size_t channels,
                                       size_t sources,
                                       double snr,
                                       struct EsigalInverse **out);

// Project channels x samples sensor data to sources x samples estimates.
//
// # Safety
// `eeg` must point to `channels * samples` doubles and `out` to
// `sources * samples` writable doubles.
enum EsigalStatus esigal_inverse_apply(const struct EsigalInverse *inv,
                                       const double *eeg,
                                       size_t samples,
                                       double *out);

// Number of sources the operator maps to, or 0 for a null handle.
//
// # Safety
// `inv` must be null or a live handle.
size_t esigal_inverse_num_sources(const struct EsigalInverse *inv);

// Copy the resolution-matrix diagonal into `buf`.
//
// # Safety
// `buf` must point to at least `len >= sources` writable doubles.
enum EsigalStatus esigal_inverse_resolution(const struct EsigalInverse *inv,
                                            double *buf,
                                            size_t len);

// Release an inverse-operator handle (null is a no-op).
//
// # Safety
// `inv` must be null or a live handle; it is invalid afterwards.
void esigal_inverse_free(struct EsigalInverse *inv);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* ESIGAL_H */
