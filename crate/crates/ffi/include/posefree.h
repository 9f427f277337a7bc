#ifndef POSEFREE_H
#define POSEFREE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_ARGUMENT = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_IO = 3,
  PF_STATUS_CONFIG = 4,
  PF_STATUS_PANIC = 5,
} PfStatus;

/**
 * A decoded radiance field.
 */
typedef struct PfField PfField;

/**
 * A model and its weights.
 */
typedef struct PfModel PfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *pf_last_error_message(void);

/**
 * Builds a randomly initialized model. `config_json` is a model
 * configuration object, or null for the defaults.
 *
 * # Safety
 * `config_json` must be null or a valid C string; `out` must be writable.
 */
enum PfStatus pf_model_new(const char *config_json, uint64_t seed, struct PfModel **out);

/**
 * Loads a checkpoint from the metadata file written by training.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be writable.
 */
enum PfStatus pf_model_load(const char *path, struct PfModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `pf_model_new`/`pf_model_load`
 * that has not been freed.
 */
void pf_model_free(struct PfModel *model);

/**
 * Input image edge length and number of trainable scalars.
 *
 * # Safety
 * `model` must be a live handle; `res` and `params` must be writable.
 */
enum PfStatus pf_model_info(const struct PfModel *model, size_t *res, size_t *params);

/**
 * Runs the pose-free forward pass on `k` images laid out `[k, res, res, 3]`
 * with values in `[0, 1]`, hosting the field in view `canonical`.
 *
 * # Safety
 * `images` must hold `k * res * res * 3` floats; `out` must be writable.
 */
enum PfStatus pf_model_forward(const struct PfModel *model,
                               const float *images,
                               size_t k,
                               size_t canonical,
                               struct PfField **out);

/**
 * # Safety
 * `field` must be null or a live handle from `pf_model_forward`.
 */
void pf_field_free(struct PfField *field);

/**
 * Grid size `[x, y, z]` and feature channel count.
 *
 * # Safety
 * `dims` must hold 3 values; `channels` must be writable.
 */
enum PfStatus pf_field_dims(const struct PfField *field, size_t *dims, size_t *channels);

/**
 * Copies the density grid, x slowest, into `out` of length `len`.
 *
 * # Safety
 * `out` must hold `len` floats.
 */
enum PfStatus pf_field_density(const struct PfField *field, float *out, size_t len);

/**
 * Renders `field` from `pose`, a row-major 3x4 camera-to-canonical
 * transform (camera-to-world for world-frame models), with pinhole
 * intrinsics `fx, fy, cx, cy` at the model resolution. Writes
 * `[res, res, 3]` colors to `rgb` and `[res, res]` opacity to `mask`
 * (either may be null).
 *
 * # Safety
 * `pose` must hold 12 doubles; non-null outputs must hold the sizes above.
 */
enum PfStatus pf_render(const struct PfModel *model,
                        const struct PfField *field,
                        const double *pose,
                        double fx,
                        double fy,
                        double cx,
                        double cy,
                        float *rgb,
                        float *mask);

/**
 * PSNR in dB of `[h, w, channels]` images in `[0, 1]`, capped at 99.
 *
 * # Safety
 * `pred` and `gt` must hold `h * w * channels` floats; `out` must be writable.
 */
enum PfStatus pf_psnr(const float *pred,
                      const float *gt,
                      size_t h,
                      size_t w,
                      size_t channels,
                      double *out);

/**
 * Mean SSIM of `[h, w, channels]` images (channel mean as grayscale).
 *
 * # Safety
 * `pred` and `gt` must hold `h * w * channels` floats; `out` must be writable.
 */
enum PfStatus pf_ssim(const float *pred,
                      const float *gt,
                      size_t h,
                      size_t w,
                      size_t channels,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POSEFREE_H */
