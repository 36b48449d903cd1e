#ifndef SWL_FFI_H
#define SWL_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible FFI call.
 */
typedef enum SwlStatus {
  Ok = 0,
  /**
   * A pointer argument was null.
   */
  NullPointer = 1,
  /**
   * An argument was out of range or otherwise invalid.
   */
  InvalidArgument = 2,
  /**
   * A computed value was NaN or infinite.
   */
  NonFinite = 3,
  /**
   * Array dimensions disagreed.
   */
  ShapeMismatch = 4,
} SwlStatus;

/**
 * Opaque handle to a lat-lon anchor grid.
 */
typedef struct SwlGrid SwlGrid;

/**
 * Opaque handle to a world-locked panorama.
 */
typedef struct SwlPano SwlPano;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *swl_version(void);

/**
 * Normalize `(w, x, y, z)` into a unit quaternion.
 *
 * # Safety
 * `out` must point to 4 writable f64 values.
 */
enum SwlStatus swl_quat_normalize(double w, double x, double y, double z, double *out);

/**
 * Hamilton product `a * b`.
 *
 * # Safety
 * `a` and `b` must point to 4 readable f64 values each; `out` to 4 writable.
 */
enum SwlStatus swl_quat_mul(const double *a, const double *b, double *out);

/**
 * Quaternion conjugate.
 *
 * # Safety
 * `q` must point to 4 readable f64 values; `out` to 4 writable.
 */
enum SwlStatus swl_quat_conjugate(const double *q, double *out);

/**
 * Rotate unit vector `v` by unit quaternion `q`.
 *
 * # Safety
 * `q` must point to 4 and `v` to 3 readable f64 values; `out` to 3 writable.
 */
enum SwlStatus swl_quat_rotate(const double *q, const double *v, double *out);

/**
 * Unnormalized quaternion `[1 + a.b, a x b]` carrying the rotation from
 * `a` to `b`; antipodal inputs yield the zero quaternion.
 *
 * # Safety
 * `a` and `b` must point to 3 readable f64 values each; `out` to 4 writable.
 */
enum SwlStatus swl_rotation_between(const double *a, const double *b, double *out);

/**
 * Angle between two directions, degrees.
 *
 * # Safety
 * `a` and `b` must point to 3 readable f64 values each; `out` to 1 writable.
 */
enum SwlStatus swl_great_circle_angle(const double *a, const double *b, double *out);

/**
 * Build a rows x cols lat-lon anchor grid (south row first).
 *
 * # Safety
 * `out` must point to a writable handle slot.
 */
enum SwlStatus swl_grid_new(uintptr_t rows, uintptr_t cols, struct SwlGrid **out);

/**
 * Release a grid handle. Null is a no-op.
 *
 * # Safety
 * `grid` must be a handle from `swl_grid_new` not yet freed.
 */
void swl_grid_free(struct SwlGrid *grid);

/**
 * Number of anchors in the grid, or 0 for a null handle.
 *
 * # Safety
 * `grid` must be a live handle or null.
 */
uintptr_t swl_grid_len(const struct SwlGrid *grid);

/**
 * Index of the row whose latitude band contains the equator.
 *
 * # Safety
 * `grid` must be a live handle or null.
 */
uintptr_t swl_grid_equator_row(const struct SwlGrid *grid);

/**
 * Anchor direction at (row, col).
 *
 * # Safety
 * `grid` must be a live handle; `out` must point to 3 writable f64 values.
 */
enum SwlStatus swl_grid_direction(const struct SwlGrid *grid,
                                  uintptr_t row,
                                  uintptr_t col,
                                  double *out);

/**
 * Greedy spherical non-max suppression: pick up to `k` of `n` scored
 * directions (3 f64 each), suppressing later candidates within
 * `radius_deg` of a pick. Writes the selected candidate indices and their
 * count; `underflow` is 1 when fewer than `k` survive.
 *
 * # Safety
 * `directions` must hold 3n readable f64 values and `scores` n; `out_indices`
 * must hold k writable entries; `out_count` and `out_underflow` one each.
 */
enum SwlStatus swl_sphere_nms(const double *directions,
                              const double *scores,
                              uintptr_t n,
                              uintptr_t k,
                              double radius_deg,
                              uintptr_t *out_indices,
                              uintptr_t *out_count,
                              int32_t *out_underflow);

/**
 * Project a camera frame onto a world-locked panorama of the given radius.
 * The frame is row-major `height x width x channels`; the pose quaternion
 * maps head-frame directions to world-frame ones.
 *
 * # Safety
 * `frame` must hold height*width*channels readable f64 values; `quat` 4;
 * `out` must point to a writable handle slot.
 */
enum SwlStatus swl_warp_fov_to_pano(const double *frame,
                                    uintptr_t height,
                                    uintptr_t width,
                                    uintptr_t channels,
                                    double fov_h_deg,
                                    double fov_v_deg,
                                    const double *quat,
                                    double radius,
                                    struct SwlPano **out);

/**
 * Release a panorama handle. Null is a no-op.
 *
 * # Safety
 * `pano` must be a handle from `swl_warp_fov_to_pano` not yet freed.
 */
void swl_pano_free(struct SwlPano *pano);

/**
 * Panorama rows, or 0 for a null handle.
 *
 * # Safety
 * `pano` must be a live handle or null.
 */
uintptr_t swl_pano_height(const struct SwlPano *pano);

/**
 * Panorama columns, or 0 for a null handle.
 *
 * # Safety
 * `pano` must be a live handle or null.
 */
uintptr_t swl_pano_width(const struct SwlPano *pano);

/**
 * Copy the panorama pixels (row-major, interleaved channels) and validity
 * mask (1 where any frame pixel landed).
 *
 * # Safety
 * `pano` must be a live handle; `out_pixels` must hold
 * height*width*channels writable f64 values and `out_mask` height*width
 * writable i32 values. Either out pointer may be null to skip that copy.
 */
enum SwlStatus swl_pano_read(const struct SwlPano *pano, double *out_pixels, int32_t *out_mask);

/**
 * Sample the panorama back into a camera frame under the given pose.
 * Writes height*width*channels pixel values and a height*width coverage
 * mask (1 where the panorama was valid at the sampled point).
 *
 * # Safety
 * `pano` must be a live handle; `quat` must hold 4 readable f64 values;
 * `out_pixels` height*width*channels writable f64 values; `out_mask`
 * height*width writable i32 values (or null to skip).
 */
enum SwlStatus swl_sample_pano_at_fov(const struct SwlPano *pano,
                                      double fov_h_deg,
                                      double fov_v_deg,
                                      uintptr_t width,
                                      uintptr_t height,
                                      const double *quat,
                                      double *out_pixels,
                                      int32_t *out_mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SWL_FFI_H */
