#ifndef DSNET_H
#define DSNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsnetStatus {
  DSNET_STATUS_OK = 0,
  DSNET_STATUS_NULL_POINTER = 1,
  DSNET_STATUS_INVALID_ARGUMENT = 2,
  DSNET_STATUS_SHAPE_MISMATCH = 3,
  DSNET_STATUS_MISSING_CHECKPOINT = 4,
  DSNET_STATUS_INVALID_CHECKPOINT = 5,
  DSNET_STATUS_IO = 6,
  DSNET_STATUS_EMPTY_GROUND_TRUTH = 7,
  DSNET_STATUS_INTERNAL = 8,
  DSNET_STATUS_PANIC = 9,
} DsnetStatus;

/**
 * A loaded student network.
 */
typedef struct DsnetModel DsnetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after a
 * successful call. The pointer stays valid until the next call.
 */
const char *dsnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dsnet_version(void);

/**
 * Loads the student network of a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DsnetStatus dsnet_model_load(const char *path, struct DsnetModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dsnet_model_load`] and not be used afterwards.
 */
void dsnet_model_free(struct DsnetModel *model);

/**
 * Side length images are resized to internally.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum DsnetStatus dsnet_model_input_size(const struct DsnetModel *model, size_t *out);

/**
 * Predicts saliency for one image of `height x width` pixels.
 *
 * `rgb` holds `3 * height * width` values (planar R, G, B). `depth`, if not
 * null, holds `height * width` values; when null the model's depth branch
 * estimates depth. `saliency_out` receives `height * width` values and
 * `depth_out`, if not null, the depth map that was used.
 *
 * # Safety
 * All non-null pointers must reference buffers of the sizes above.
 */
enum DsnetStatus dsnet_model_infer(const struct DsnetModel *model,
                                   const float *rgb,
                                   const float *depth,
                                   size_t height,
                                   size_t width,
                                   float *saliency_out,
                                   float *depth_out);

/**
 * Mean absolute error between a saliency map and a binary mask, both
 * `h x w`.
 *
 * # Safety
 * `pred` and `gt` must hold `h * w` values; `out` must be valid.
 */
enum DsnetStatus dsnet_mae(const double *pred, const double *gt, size_t h, size_t w, double *out);

/**
 * Structure measure with equal object/region balance.
 *
 * # Safety
 * As for [`dsnet_mae`].
 */
enum DsnetStatus dsnet_s_measure(const double *pred,
                                 const double *gt,
                                 size_t h,
                                 size_t w,
                                 double *out);

/**
 * Maximum F-measure (beta^2 = 0.3, 256 thresholds).
 *
 * # Safety
 * As for [`dsnet_mae`].
 */
enum DsnetStatus dsnet_f_measure_max(const double *pred,
                                     const double *gt,
                                     size_t h,
                                     size_t w,
                                     double *out);

/**
 * Maximum enhanced-alignment measure (256 thresholds).
 *
 * # Safety
 * As for [`dsnet_mae`].
 */
enum DsnetStatus dsnet_e_measure_max(const double *pred,
                                     const double *gt,
                                     size_t h,
                                     size_t w,
                                     double *out);

/**
 * Reads the first channel of an image file into `out`, which must hold
 * `height * width` values; the file's size is reported through
 * `height`/`width` when `out` is null.
 *
 * # Safety
 * `path` must be NUL-terminated; `height` and `width` must be valid.
 */
enum DsnetStatus dsnet_read_gray(const char *path, double *out, size_t *height, size_t *width);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSNET_H */
