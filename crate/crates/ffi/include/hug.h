#ifndef HUG_H
#define HUG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum HugStatus {
  HUG_STATUS_OK = 0,
  HUG_STATUS_NULL_POINTER = 1,
  HUG_STATUS_INVALID_ARGUMENT = 2,
  HUG_STATUS_SHAPE_MISMATCH = 3,
  HUG_STATUS_FORMAT = 4,
  HUG_STATUS_NUMERICAL = 5,
  HUG_STATUS_IO = 6,
  HUG_STATUS_PANIC = 7,
} HugStatus;

/**
 * Opaque trained model.
 */
typedef struct HugModel HugModel;

typedef struct HugDims {
  size_t k;
  size_t d;
  size_t d_img;
  size_t d_txt;
  /**
   * Nonzero if the model emits variances.
   */
  uint8_t probabilistic;
} HugDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *hug_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` owns a model to be released with `hug_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum HugStatus hug_model_load(const char *path, struct HugModel **out);

/**
 * Loads a checkpoint from memory.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be writable.
 */
enum HugStatus hug_model_load_bytes(const uint8_t *bytes, size_t len, struct HugModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from a load function and not be used afterwards.
 */
void hug_model_free(struct HugModel *model);

/**
 * # Safety
 * `model` must be a live model and `out` writable.
 */
enum HugStatus hug_model_dims(const struct HugModel *model, struct HugDims *out);

/**
 * Encodes `n` queries. `x_r` is `n x d_img`, `x_t` is `n x d_txt`; `mu_out` and
 * `var_out` receive `n x K x D` values each.
 *
 * # Safety
 * All pointers must reference arrays of the stated sizes.
 */
enum HugStatus hug_encode_query(const struct HugModel *model,
                                const double *x_r,
                                const double *x_t,
                                size_t n,
                                double *mu_out,
                                double *var_out);

/**
 * Encodes `n` target images (`n x d_img`) into `n x K x D` means and variances.
 *
 * # Safety
 * All pointers must reference arrays of the stated sizes.
 */
enum HugStatus hug_encode_target(const struct HugModel *model,
                                 const double *x_c,
                                 size_t n,
                                 double *mu_out,
                                 double *var_out);

/**
 * Expected squared distance between two `K x D` diagonal Gaussians.
 *
 * # Safety
 * The four arrays must each hold `k * d` values and `out` be writable.
 */
enum HugStatus hug_holistic_distance(const double *mu_q,
                                     const double *var_q,
                                     const double *mu_c,
                                     const double *var_c,
                                     size_t k,
                                     size_t d,
                                     double *out);

/**
 * Ranks `n_gallery` images (`n_gallery x d_img`) for one query; `order_out`
 * receives gallery row indices, nearest first.
 *
 * # Safety
 * All pointers must reference arrays of the stated sizes.
 */
enum HugStatus hug_rank_gallery(const struct HugModel *model,
                                const double *x_r,
                                const double *x_t,
                                const double *gallery,
                                size_t n_gallery,
                                uint64_t *order_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HUG_H */
