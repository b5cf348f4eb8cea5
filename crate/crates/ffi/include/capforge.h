#ifndef CAPFORGE_H
#define CAPFORGE_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum CfStatus {
  CF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CF_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  CF_STATUS_INVALID_UTF8 = 2,
  /**
   * File could not be read or parsed.
   */
  CF_STATUS_IO_OR_PARSE = 3,
  /**
   * Input values were out of the function's domain.
   */
  CF_STATUS_INVALID_INPUT = 4,
  /**
   * Projection: every corner sits behind the camera plane.
   */
  CF_STATUS_BEHIND_CAMERA = 5,
  /**
   * Projection: visible area after clipping is under one pixel.
   */
  CF_STATUS_OFF_SCREEN = 6,
  /**
   * An index argument was out of range.
   */
  CF_STATUS_OUT_OF_RANGE = 7,
} CfStatus;

/**
 * Opaque handle to a loaded manifest.
 */
typedef struct CfManifest CfManifest;

/**
 * Pinhole camera intrinsics and image size.
 */
typedef struct CfCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} CfCamera;

/**
 * Axis-aligned projected box in pixel coordinates.
 */
typedef struct CfBBox {
  int32_t xmin;
  int32_t ymin;
  int32_t xmax;
  int32_t ymax;
} CfBBox;

/**
 * Caption word statistics for one round of a manifest.
 */
typedef struct CfCaptionStats {
  uint64_t count;
  double mean_words;
  double std_words;
  uint64_t failed;
} CfCaptionStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Detects the saturation round of a positive growth-statistic series.
 *
 * Writes the saturation round to `out_round`, or -1 when the series has
 * not saturated. `series` must contain `len` finite positive values.
 *
 * # Safety
 * `series` must point to `len` readable doubles; `out_round` must be a
 * valid writable pointer.
 */
enum CfStatus cf_detect_saturation(const double *series,
                                   uintptr_t len,
                                   double epsilon,
                                   uintptr_t min_rounds_before_check,
                                   int64_t *out_round);

/**
 * Projects a yaw-rotated 3D box onto the image plane and clips it.
 *
 * `center` and `size` are 3-element arrays (meters, camera frame). On
 * success the rounded, clipped pixel box is written to `out_bbox`.
 *
 * # Safety
 * `center` and `size` must each point to 3 readable doubles; `camera` and
 * `out_bbox` must be valid pointers.
 */
enum CfStatus cf_project_box(const double *center,
                             const double *size,
                             double yaw,
                             const struct CfCamera *camera,
                             double z_near,
                             struct CfBBox *out_bbox);

/**
 * Opens a manifest JSONL file (with its lineage sidecar) into a handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_handle` must be valid.
 * The handle must be released with `cf_manifest_free`.
 */
enum CfStatus cf_manifest_open(const char *path, struct CfManifest **out_handle);

/**
 * Number of records in the manifest.
 *
 * # Safety
 * `handle` must come from `cf_manifest_open` and not yet be freed.
 */
uintptr_t cf_manifest_len(const struct CfManifest *handle);

/**
 * Returns the id of the record at `index` as a caller-freed string.
 *
 * # Safety
 * `handle` must be live; `out_id` must be valid. Free the result with
 * `cf_string_free`.
 */
enum CfStatus cf_manifest_record_id(const struct CfManifest *handle,
                                    uintptr_t index,
                                    char **out_id);

/**
 * Caption statistics for the manifest at `round`.
 *
 * # Safety
 * `handle` must be live; `out_stats` must be valid.
 */
enum CfStatus cf_manifest_caption_stats(const struct CfManifest *handle,
                                        uint32_t round,
                                        struct CfCaptionStats *out_stats);

/**
 * Releases a manifest handle. Passing null is a no-op.
 *
 * # Safety
 * `handle` must come from `cf_manifest_open` and be freed at most once.
 */
void cf_manifest_free(struct CfManifest *handle);

/**
 * Counts grounded spans in a caption: valid `[x1,y1,x2,y2]`-bound spans
 * go to `out_valid`, malformed or out-of-bounds ones to `out_dropped`.
 *
 * # Safety
 * `text` must be NUL-terminated; the out pointers must be valid.
 */
enum CfStatus cf_count_grounded_spans(const char *text,
                                      uint32_t width,
                                      uint32_t height,
                                      uintptr_t *out_valid,
                                      uintptr_t *out_dropped);

/**
 * Frees a string returned by this library. Passing null is a no-op.
 *
 * # Safety
 * `s` must come from a `cf_*` function and be freed at most once.
 */
void cf_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CAPFORGE_H */
