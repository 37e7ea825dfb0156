#ifndef FLICKER_EWS_H
#define FLICKER_EWS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FewsStatus {
  FEWS_STATUS_OK = 0,
  FEWS_STATUS_NULL_POINTER = 1,
  FEWS_STATUS_INVALID_ARGUMENT = 2,
  FEWS_STATUS_DATA_ERROR = 3,
  FEWS_STATUS_NUMERICAL_ERROR = 4,
  FEWS_STATUS_BUFFER_TOO_SMALL = 5,
  FEWS_STATUS_INTERNAL_ERROR = 6,
} FewsStatus;

typedef enum FewsRegime {
  FEWS_REGIME_FLICKERING = 0,
  FEWS_REGIME_NULL = 1,
} FewsRegime;

/*
 Checkpoints paired with window fractions.
 */
typedef struct FewsEnsemble FewsEnsemble;

/*
 A loaded classifier checkpoint.
 */
typedef struct FewsModel FewsModel;

/*
 Result of an ensemble scan.
 */
typedef struct FewsTrace FewsTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version, a static NUL-terminated string.
 */
const char *fews_version(void);

/*
 Message of the last failed call on this thread (empty after a success).
 */
const char *fews_last_error_message(void);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` valid for writing.
 */
enum FewsStatus fews_model_load(const char *path, struct FewsModel **out);

/*
 # Safety
 `model` must be NULL or a handle from [`fews_model_load`] not yet freed.
 */
void fews_model_free(struct FewsModel *model);

/*
 # Safety
 `model` must be a live handle and `out` valid for writing.
 */
enum FewsStatus fews_model_native_length(const struct FewsModel *model, size_t *out);

/*
 Flicker probability of a raw series of exactly the model's native
 length, assembled with the checkpoint's variance window.

 # Safety
 `series` must point to `len` values, `model` be live, `out` writable.
 */
enum FewsStatus fews_model_predict(const struct FewsModel *model,
                                   const double *series,
                                   size_t len,
                                   double *out_p_flicker);

/*
 Creates an empty ensemble with the default stride and variance base.

 # Safety
 `out` must be valid for writing.
 */
enum FewsStatus fews_ensemble_new(struct FewsEnsemble **out);

/*
 # Safety
 `ensemble` must be NULL or a live handle.
 */
void fews_ensemble_free(struct FewsEnsemble *ensemble);

/*
 Adds a copy of `model` with window fraction `window_fraction` in (0, 1).
 The model handle may be freed afterwards.

 # Safety
 Both handles must be live.
 */
enum FewsStatus fews_ensemble_add(struct FewsEnsemble *ensemble,
                                  const struct FewsModel *model,
                                  double window_fraction);

/*
 Sets the window stride as a fraction of the window, in (0, 1].

 # Safety
 `ensemble` must be live.
 */
enum FewsStatus fews_ensemble_set_stride(struct FewsEnsemble *ensemble, double stride_fraction);

/*
 Slides every member over `series` and returns the ensemble trace.

 # Safety
 `series` must point to `len` values, `ensemble` be live, `out` writable.
 */
enum FewsStatus fews_ensemble_scan(const struct FewsEnsemble *ensemble,
                                   const double *series,
                                   size_t len,
                                   struct FewsTrace **out);

/*
 # Safety
 `trace` must be NULL or a live handle.
 */
void fews_trace_free(struct FewsTrace *trace);

/*
 Number of trace points; 0 for a NULL handle.

 # Safety
 `trace` must be NULL or live.
 */
size_t fews_trace_len(const struct FewsTrace *trace);

/*
 Copies window-end indices and ensemble flicker probabilities into
 caller buffers of `capacity` elements each. Either buffer may be NULL.

 # Safety
 Non-NULL buffers must hold `capacity` elements.
 */
enum FewsStatus fews_trace_copy(const struct FewsTrace *trace,
                                size_t *out_indices,
                                double *out_p_flicker,
                                size_t capacity);

/*
 Minimum over members of `max - mean` of the member trace.

 # Safety
 `trace` must be live and `out` writable.
 */
enum FewsStatus fews_trace_conservative_score(const struct FewsTrace *trace, double *out);

/*
 Back-filled trailing population variance; `out` holds `len` values.

 # Safety
 `x` and `out` must hold `len` values.
 */
enum FewsStatus fews_rolling_variance(const double *x, size_t len, size_t window, double *out);

/*
 `max V / (mean V + std V)` of the trailing variance `V`.

 # Safety
 `x` must hold `len` values and `out` be writable.
 */
enum FewsStatus fews_variance_score(const double *x, size_t len, size_t window, double *out);

/*
 `max(p) - mean(p)`.

 # Safety
 `p` must hold `len` values and `out` be writable.
 */
enum FewsStatus fews_dl_score(const double *p, size_t len, double *out);

/*
 Area under the ROC curve of "alarm when score >= threshold".

 # Safety
 `pos` and `neg` must hold `n_pos` and `n_neg` values; `out` writable.
 */
enum FewsStatus fews_roc_auc(const double *pos,
                             size_t n_pos,
                             const double *neg,
                             size_t n_neg,
                             double *out);

/*
 Replicate `replicate` of a named test system (`cubic`, `exponential`,
 `tanh`, `hill`, `logistic`, `arctan`) with its default noise level and
 control range, `len` samples at dt = 0.01, written to `out`.

 # Safety
 `system` must be a NUL-terminated string and `out` hold `len` values.
 */
enum FewsStatus fews_simulate_named(const char *system,
                                    enum FewsRegime regime,
                                    size_t len,
                                    uint64_t base_seed,
                                    size_t replicate,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLICKER_EWS_H */
