#ifndef SHADES_H
#define SHADES_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Values 2 to 4 match the command-line exit codes.
typedef enum ShadesStatus {
  SHADES_STATUS_OK = 0,
  // Null pointer, invalid UTF-8 or out-of-range argument.
  SHADES_STATUS_INVALID_ARGUMENT = 1,
  SHADES_STATUS_CONFIG = 2,
  SHADES_STATUS_DATA = 3,
  SHADES_STATUS_NUMERICAL = 4,
  SHADES_STATUS_PANIC = 5,
} ShadesStatus;

typedef struct ShadesAssignment ShadesAssignment;

typedef struct ShadesClassifiers ShadesClassifiers;

typedef struct ShadesLabels ShadesLabels;

typedef struct ShadesModel ShadesModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or null if none. The
// string stays valid until the next failing call on the same thread.
const char *shades_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *shades_version(void);

// Load one attribute from a label CSV. `attribute` may be null when the file
// holds a single attribute.
//
// # Safety
// `path` and a non-null `attribute` must be NUL-terminated strings; `out` must be writable.
enum ShadesStatus shades_labels_load(const char *path,
                                     const char *attribute,
                                     struct ShadesLabels **out);

// Build a label matrix from parallel arrays of `count` observations.
// Annotators and items get ids `a{i}` and `x{j}`.
//
// # Safety
// Each array must hold `count` elements; `out` must be writable.
enum ShadesStatus shades_labels_from_triples(size_t num_annotators,
                                             size_t num_items,
                                             const uint32_t *annotators,
                                             const uint32_t *items,
                                             const uint8_t *labels,
                                             size_t count,
                                             struct ShadesLabels **out);

// # Safety
// `labels` must be a live handle; output pointers may be null to skip.
enum ShadesStatus shades_labels_dims(const struct ShadesLabels *labels,
                                     size_t *num_annotators,
                                     size_t *num_items,
                                     size_t *num_observations);

// # Safety
// `labels` must be null or a handle from this library not yet freed.
void shades_labels_free(struct ShadesLabels *labels);

// Bayesian factorization by Gibbs sampling. `sigma2 <= 0` selects the default
// observation variance.
//
// # Safety
// `labels` must be a live handle; `out` must be writable.
enum ShadesStatus shades_fit_bayesian(const struct ShadesLabels *labels,
                                      size_t dim,
                                      size_t samples,
                                      size_t burn_in,
                                      double sigma2,
                                      uint64_t seed,
                                      struct ShadesModel **out);

// MAP factorization by gradient descent.
//
// # Safety
// `labels` must be a live handle; `out` must be writable.
enum ShadesStatus shades_fit_map(const struct ShadesLabels *labels,
                                 size_t dim,
                                 double step,
                                 size_t max_iters,
                                 uint64_t seed,
                                 struct ShadesModel **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ShadesStatus shades_model_load(const char *path, struct ShadesModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum ShadesStatus shades_model_save(const struct ShadesModel *model, const char *path);

// # Safety
// `model` must be a live handle; output pointers may be null to skip.
enum ShadesStatus shades_model_dims(const struct ShadesModel *model,
                                    size_t *dim,
                                    size_t *num_annotators,
                                    size_t *num_items);

// Imputed score in [0, 1] for annotator `annotator` on item `item`.
//
// # Safety
// `model` must be a live handle; `score` must be writable.
enum ShadesStatus shades_impute(const struct ShadesModel *model,
                                size_t annotator,
                                size_t item,
                                double *score);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void shades_model_free(struct ShadesModel *model);

// Cluster the annotator factors with K chosen by silhouette over
// `[k_min, k_max]`, then drop shades smaller than `min_size`. A nonzero
// `nearest` selects the nearest-cluster silhouette instead of the default.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum ShadesStatus shades_select_k(const struct ShadesModel *model,
                                  size_t k_min,
                                  size_t k_max,
                                  size_t min_size,
                                  int32_t nearest,
                                  uint64_t seed,
                                  struct ShadesAssignment **out);

// Selected K (before pruning) and the number of annotators.
//
// # Safety
// `assignment` must be a live handle; output pointers may be null to skip.
enum ShadesStatus shades_assignment_dims(const struct ShadesAssignment *assignment,
                                         size_t *k,
                                         size_t *num_annotators);

// Shade of one annotator, or -1 if its shade was pruned.
//
// # Safety
// `assignment` must be a live handle; `shade` must be writable.
enum ShadesStatus shades_assignment_get(const struct ShadesAssignment *assignment,
                                        size_t annotator,
                                        int64_t *shade);

// # Safety
// `assignment` must be null or a handle from this library not yet freed.
void shades_assignment_free(struct ShadesAssignment *assignment);

// Load a classifier set written by the `train` command.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum ShadesStatus shades_classifiers_load(const char *path, struct ShadesClassifiers **out);

// Label for a known user on one raw feature vector. An unknown user, or a
// null `user`, is answered by the consensus model and `fallback` is set to 1.
//
// # Safety
// `set` must be a live handle, `features` must hold `len` values, and
// `label` must be writable; `margin` and `fallback` may be null.
enum ShadesStatus shades_predict(const struct ShadesClassifiers *set,
                                 const char *user,
                                 const double *features,
                                 size_t len,
                                 uint8_t *label,
                                 double *margin,
                                 int32_t *fallback);

// # Safety
// `set` must be null or a handle from this library not yet freed.
void shades_classifiers_free(struct ShadesClassifiers *set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SHADES_H */
