#ifndef MSDA_H
#define MSDA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MsdaStatus {
  MSDA_STATUS_OK = 0,
  MSDA_STATUS_NULL_POINTER = 1,
  MSDA_STATUS_SHAPE = 2,
  MSDA_STATUS_NUMERIC = 3,
  MSDA_STATUS_DEGENERATE = 4,
  MSDA_STATUS_SAMPLE_SIZE = 5,
  MSDA_STATUS_PARAMETER = 6,
  MSDA_STATUS_STATE = 7,
  MSDA_STATUS_CONFIG = 8,
  MSDA_STATUS_IO = 9,
  MSDA_STATUS_PARSE = 10,
  MSDA_STATUS_BUFFER_TOO_SMALL = 11,
  MSDA_STATUS_PANIC = 99,
} MsdaStatus;

typedef enum MsdaKernelKind {
  // Single Gaussian kernel with the given bandwidth.
  MSDA_KERNEL_KIND_FIXED = 0,
  // Median pairwise distance of the pooled samples.
  MSDA_KERNEL_KIND_MEDIAN = 1,
  // Average of kernels at 0.5, 1 and 2 times the median bandwidth.
  MSDA_KERNEL_KIND_MULTI = 2,
} MsdaKernelKind;

// Trained backbone loaded from a checkpoint.
typedef struct MsdaModel MsdaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// successful call. Valid until the next call on the same thread.
const char *msda_last_error(void);

// Cauchy–Schwarz divergence between two sample sets sharing `dim` columns.
// `sigma` is used only by the fixed kernel.
//
// # Safety
// `source` and `target` must point to `n_source * dim` and `n_target * dim`
// doubles; `out` must be writable.
enum MsdaStatus msda_cs_divergence(const double *source,
                                   size_t n_source,
                                   const double *target,
                                   size_t n_target,
                                   size_t dim,
                                   enum MsdaKernelKind kind,
                                   double sigma,
                                   double *out);

// Conditional Cauchy–Schwarz divergence between `(z, y)` pairs. Features
// share `dim` columns and outputs share `out_dim` columns.
//
// # Safety
// Each pointer must reference the number of doubles implied by its
// dimensions; `out` must be writable.
enum MsdaStatus msda_ccs_divergence(const double *z_a,
                                    const double *y_a,
                                    size_t n_a,
                                    const double *z_b,
                                    const double *y_b,
                                    size_t n_b,
                                    size_t dim,
                                    size_t out_dim,
                                    enum MsdaKernelKind kind,
                                    double sigma,
                                    double out_sigma,
                                    double *out);

// Euclidean Alignment of `n_trials` trials of `channels x samples`, laid
// out trial-major then row-major. Writes the aligned trials to `out`
// (same layout, may not alias `trials`).
//
// # Safety
// `trials` and `out` must each hold `n_trials * channels * samples` doubles.
enum MsdaStatus msda_euclidean_align(const double *trials,
                                     size_t n_trials,
                                     size_t channels,
                                     size_t samples,
                                     double *out);

// Loss weights `(alpha_tau, beta_tau)` at epoch `tau`.
//
// # Safety
// `alpha_out` and `beta_out` must be writable.
enum MsdaStatus msda_schedule(double tau,
                              double alpha,
                              double beta,
                              double offset,
                              double *alpha_out,
                              double *beta_out);

// Percentile source selection over `n` source-to-target distances. The
// selected indices (ascending) go to `selected` (capacity `capacity`), their
// count to `n_selected` and the threshold to `threshold`. `fallback` is set
// to 1 when no distance fell below the threshold and the nearest source was
// taken. Returns `BufferTooSmall` (with `n_selected` set) if `capacity` is
// insufficient.
//
// # Safety
// `dists` must hold `n` doubles and `selected` `capacity` entries; the
// remaining outputs must be writable (`fallback` may be null).
enum MsdaStatus msda_select_by_percentile(const double *dists,
                                          size_t n,
                                          double q,
                                          size_t *selected,
                                          size_t capacity,
                                          size_t *n_selected,
                                          double *threshold,
                                          int32_t *fallback);

// Loads a checkpoint written by `msda train`. Release with
// [`msda_model_free`].
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum MsdaStatus msda_model_load(const char *path, struct MsdaModel **out);

// Channels, samples per trial and class count expected by the model.
//
// # Safety
// `model` must come from [`msda_model_load`]; outputs must be writable.
enum MsdaStatus msda_model_shape(const struct MsdaModel *model,
                                 size_t *channels,
                                 size_t *samples,
                                 size_t *n_classes);

// Predicts a class (0-based) per trial. With `align` non-zero the trials
// are first Euclidean-aligned as one subject, matching training.
//
// # Safety
// `model` must come from [`msda_model_load`]; `trials` must hold
// `n_trials * channels * samples` doubles and `labels_out` `n_trials`
// entries.
enum MsdaStatus msda_model_predict(const struct MsdaModel *model,
                                   const double *trials,
                                   size_t n_trials,
                                   size_t channels,
                                   size_t samples,
                                   int32_t align,
                                   size_t *labels_out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`msda_model_load`] and not be used afterwards.
void msda_model_free(struct MsdaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MSDA_H */
