#ifndef HEADSIM_H
#define HEADSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_ARGUMENT = 2,
  HS_STATUS_BUNDLE = 3,
  HS_STATUS_NUMERICAL = 4,
  HS_STATUS_IO = 5,
  HS_STATUS_PANIC = 6,
} HsStatus;

typedef enum HsMetric {
  HS_METRIC_PK = 0,
  HS_METRIC_CS = 1,
  HS_METRIC_SIMPLE_CS = 2,
  HS_METRIC_LINEAR_CKA = 3,
  HS_METRIC_PROCRUSTES = 4,
} HsMetric;

typedef enum HsPairMode {
  HS_PAIR_MODE_STRICT_EARLIER = 0,
  HS_PAIR_MODE_SAME_TYPE = 1,
} HsPairMode;

/**
 * Loaded model weights.
 */
typedef struct HsModel HsModel;

/**
 * Scores for every pair of one pairing.
 */
typedef struct HsTable HsTable;

typedef struct HsModelConfig {
  size_t d_model;
  size_t d_head;
  size_t n_layers;
  size_t n_heads;
  size_t vocab_size;
} HsModelConfig;

typedef struct HsPairScore {
  size_t src_layer;
  size_t src_head;
  size_t dst_layer;
  size_t dst_head;
  double score;
} HsPairScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *hs_last_error_message(void);

/**
 * Opens a tensor bundle directory and loads its attention weights.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HsStatus hs_model_open(const char *path, struct HsModel **out);

/**
 * # Safety
 * `model` must come from `hs_model_open` and not be used afterwards. Null is ignored.
 */
void hs_model_free(struct HsModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum HsStatus hs_model_config(const struct HsModel *model, struct HsModelConfig *out);

/**
 * Scores all pairs of `pairing` (two letters such as "OQ").
 *
 * # Safety
 * `model` must be valid, `pairing` NUL-terminated, `out` writable.
 */
enum HsStatus hs_score_pairs(const struct HsModel *model,
                             enum HsMetric metric,
                             const char *pairing,
                             enum HsPairMode mode,
                             struct HsTable **out);

/**
 * Number of pairs; 0 for a null table.
 *
 * # Safety
 * `table` must be null or valid.
 */
size_t hs_table_len(const struct HsTable *table);

/**
 * # Safety
 * `table` and `out` must be valid pointers.
 */
enum HsStatus hs_table_get(const struct HsTable *table, size_t index, struct HsPairScore *out);

/**
 * # Safety
 * `table` must come from `hs_score_pairs` and not be used afterwards. Null is ignored.
 */
void hs_table_free(struct HsTable *table);

/**
 * PK between the column spans of two d x m matrices in column-major order.
 *
 * # Safety
 * `a` and `b` must each point to d*m doubles; `out` must be writable.
 */
enum HsStatus hs_projection_kernel(const double *a,
                                   const double *b,
                                   size_t d,
                                   size_t m,
                                   double *out);

/**
 * Mean and variance of PK between independent uniform m-subspaces of R^d.
 *
 * # Safety
 * `mean` and `variance` must be writable.
 */
enum HsStatus hs_tight_reference(size_t d, size_t m, double *mean, double *variance);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEADSIM_H */
