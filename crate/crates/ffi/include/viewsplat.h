#ifndef VIEWSPLAT_H
#define VIEWSPLAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Values per Gaussian in [`vs_cloud_get`]: position, color, opacity,
 * scale, rotation.
 */
#define VS_GAUSSIAN_FLOATS 14

typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_SHAPE_MISMATCH = 3,
  VS_STATUS_NON_FINITE = 4,
  VS_STATUS_OUT_OF_DOMAIN = 5,
  VS_STATUS_FORMAT = 6,
  VS_STATUS_CONFIG = 7,
  VS_STATUS_IO = 8,
  VS_STATUS_BUFFER_TOO_SMALL = 9,
  VS_STATUS_PANIC = 10,
} VsStatus;

/**
 * Activated Gaussians.
 */
typedef struct VsCloud VsCloud;

/**
 * Reconstruction network.
 */
typedef struct VsModel VsModel;

/**
 * Posed views of one scene in the dataset layout order.
 */
typedef struct VsViews VsViews;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len` bytes. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t vs_last_error(char *buf, size_t len);

/**
 * Freshly initialized default model.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VsStatus vs_model_new(uint64_t seed, struct VsModel **out);

/**
 * Model weights from a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VsStatus vs_model_load(const char *path, struct VsModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library, freed once.
 */
void vs_model_free(struct VsModel *model);

/**
 * Reads a scene directory in the dataset layout.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VsStatus vs_views_load(const char *dir, struct VsViews **out);

/**
 * Generates a procedural scene and renders it at the default 64-view
 * layout. `kind` and `scheme` take the CLI names, e.g. "box", "two-tone".
 *
 * # Safety
 * `kind` and `scheme` must be NUL-terminated strings; `out` valid.
 */
enum VsStatus vs_views_generate(const char *kind,
                                const char *scheme,
                                size_t count,
                                uint64_t seed,
                                struct VsViews **out);

/**
 * # Safety
 * `views` must be a valid handle.
 */
size_t vs_views_count(const struct VsViews *views);

/**
 * # Safety
 * `views` must be null or a handle from this library, freed once.
 */
void vs_views_free(struct VsViews *views);

/**
 * Reconstructs from the views at `indices`.
 *
 * # Safety
 * Handles must be valid, `indices` valid for `n` entries, `out` valid.
 */
enum VsStatus vs_reconstruct(const struct VsModel *model,
                             const struct VsViews *views,
                             const size_t *indices,
                             size_t n,
                             struct VsCloud **out);

/**
 * # Safety
 * `cloud` must be a valid handle.
 */
size_t vs_cloud_count(const struct VsCloud *cloud);

/**
 * Writes the 14 activated values of Gaussian `i` to `out`.
 *
 * # Safety
 * `cloud` must be valid and `out` valid for 14 doubles.
 */
enum VsStatus vs_cloud_get(const struct VsCloud *cloud, size_t i, double *out);

/**
 * # Safety
 * `cloud` must be valid and `path` NUL-terminated.
 */
enum VsStatus vs_cloud_export_ply(const struct VsCloud *cloud, const char *path);

/**
 * Renders `cloud` from the camera of view `index` over a white
 * background into `rgb` (row-major, 3 doubles per pixel).
 *
 * # Safety
 * Handles must be valid and `rgb` valid for `len` doubles.
 */
enum VsStatus vs_render(const struct VsCloud *cloud,
                        const struct VsViews *views,
                        size_t index,
                        double *rgb,
                        size_t len);

/**
 * PSNR between the render of `cloud` and the stored view `index`.
 *
 * # Safety
 * Handles must be valid and `out` a valid pointer.
 */
enum VsStatus vs_view_psnr(const struct VsCloud *cloud,
                           const struct VsViews *views,
                           size_t index,
                           double *out);

/**
 * # Safety
 * `cloud` must be null or a handle from this library, freed once.
 */
void vs_cloud_free(struct VsCloud *cloud);

/**
 * Match-count selection rule. `selected` receives 1 for kept candidates
 * and 0 otherwise; `threshold` may be null.
 *
 * # Safety
 * `counts` and `selected` must be valid for `n` entries, `queries` for
 * `n_queries`.
 */
enum VsStatus vs_select_by_counts(const size_t *counts,
                                  size_t n,
                                  const size_t *queries,
                                  size_t n_queries,
                                  uint8_t *selected,
                                  double *threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIEWSPLAT_H */
