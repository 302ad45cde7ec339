#ifndef COLFIELD_H
#define COLFIELD_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_INPUT = 2,
  CF_STATUS_SHAPE_MISMATCH = 3,
  CF_STATUS_IO = 4,
  CF_STATUS_CORRUPT = 5,
  CF_STATUS_VERSION = 6,
  CF_STATUS_CONFIG = 7,
  CF_STATUS_NUMERICAL = 8,
  CF_STATUS_PANIC = 9,
} CfStatus;

/**
 * An RGB image with channel values in [0, 1].
 */
typedef struct CfImage CfImage;

/**
 * A trained model with its optimizer state.
 */
typedef struct CfModel CfModel;

/**
 * A scene description.
 */
typedef struct CfScene CfScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *cf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cf_version(void);

/**
 * Builds a template scene (`static-room`, `moving-box` or
 * `two-agent-intersection`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_scene_from_template(const char *name, uint64_t seed, struct CfScene **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_scene_load(const char *path, struct CfScene **out);

/**
 * # Safety
 * `scene` must be a live handle and `path` a NUL-terminated string.
 */
enum CfStatus cf_scene_save(const struct CfScene *scene, const char *path);

/**
 * Number of (agent, camera, timestamp) views; 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
size_t cf_scene_view_count(const struct CfScene *scene);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void cf_scene_free(struct CfScene *scene);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_model_load(const char *path, struct CfModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum CfStatus cf_model_save(const struct CfModel *model, const char *path);

/**
 * Completed static and dynamic training steps.
 *
 * # Safety
 * `model` must be a live handle; the step pointers may be null.
 */
enum CfStatus cf_model_steps(const struct CfModel *model,
                             uint64_t *static_steps,
                             uint64_t *dynamic_steps);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void cf_model_free(struct CfModel *model);

/**
 * Renders the view of `camera` on `agent` at timestamp `t` with `samples`
 * quadrature points per ray.
 *
 * # Safety
 * Handles must be live, strings NUL-terminated and `out` a valid pointer.
 */
enum CfStatus cf_render_view(const struct CfModel *model,
                             const struct CfScene *scene,
                             const char *agent,
                             const char *camera,
                             int64_t t,
                             size_t samples,
                             struct CfImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CfStatus cf_image_read_ppm(const char *path, struct CfImage **out);

/**
 * # Safety
 * `image` must be a live handle and `path` a NUL-terminated string.
 */
enum CfStatus cf_image_write_ppm(const struct CfImage *image, const char *path);

/**
 * Image size in pixels.
 *
 * # Safety
 * `image` must be a live handle; `width` and `height` valid pointers.
 */
enum CfStatus cf_image_size(const struct CfImage *image, size_t *width, size_t *height);

/**
 * Copies the pixels as row-major RGB doubles into `buf`, which must hold
 * `3 * width * height` values.
 *
 * # Safety
 * `image` must be a live handle and `buf` writable for `len` doubles.
 */
enum CfStatus cf_image_pixels(const struct CfImage *image, double *buf, size_t len);

/**
 * # Safety
 * `image` must be null or a handle not yet freed.
 */
void cf_image_free(struct CfImage *image);

/**
 * Peak signal-to-noise ratio in decibels; identical images give infinity.
 *
 * # Safety
 * Both images must be live handles and `out` a valid pointer.
 */
enum CfStatus cf_psnr(const struct CfImage *a, const struct CfImage *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COLFIELD_H */
