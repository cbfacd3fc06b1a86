#ifndef FGSSNET_H
#define FGSSNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FgssStatus {
  FGSS_STATUS_OK = 0,
  FGSS_STATUS_NULL_POINTER = 1,
  FGSS_STATUS_INVALID_ARGUMENT = 2,
  FGSS_STATUS_SHAPE_MISMATCH = 3,
  FGSS_STATUS_UNUSABLE_FLOORPLAN = 4,
  FGSS_STATUS_CHECKPOINT = 5,
  FGSS_STATUS_IO = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  FGSS_STATUS_PANIC = 7,
} FgssStatus;

/**
 * A loaded segmenter, with its feature extractor for fgss variants.
 */
typedef struct FgssModel FgssModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fgss_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fgss_version(void);

/**
 * Loads the best weights of a segmenter checkpoint (directory or manifest
 * path). On success `*out` owns a handle for [`fgss_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FgssStatus fgss_model_load(const char *path, struct FgssModel **out);

/**
 * Releases a handle from [`fgss_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not used afterwards.
 */
void fgss_model_free(struct FgssModel *model);

/**
 * Tile side of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fgss_model_tile_side(const struct FgssModel *model);

/**
 * 1 if segmentation needs a crop sidecar, 0 otherwise (or for null).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t fgss_model_requires_crops(const struct FgssModel *model);

/**
 * Analytic parameter count of a named variant ("fgss16", "unet32-norec",
 * ...).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FgssStatus fgss_parameter_count(const char *name, uint64_t *out);

/**
 * Segments one floorplan.
 *
 * `image` holds `height * width` grey values. `sidecar_json` is the crop
 * sidecar (`{floorplanId, crops: [{tag, x, y, side, widthPx}]}` in image
 * coordinates); it is required for fgss models and, when given, also sets
 * the width normalization. `stride` 0 selects the default of 30 px.
 * `probability` (may be null) receives `height * width` floats and `mask`
 * (may be null) `height * width` bytes of 0 or 1, both at input resolution.
 *
 * # Safety
 * Buffers must be valid for `height * width` elements; strings must be
 * NUL-terminated or null.
 */
enum FgssStatus fgss_segment(const struct FgssModel *model,
                             const float *image,
                             size_t height,
                             size_t width,
                             const char *sidecar_json,
                             size_t stride,
                             float threshold,
                             float *probability,
                             uint8_t *mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FGSSNET_H */
