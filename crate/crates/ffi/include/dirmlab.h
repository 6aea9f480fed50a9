/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef DIRMLAB_H
#define DIRMLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a C API call. Values 2 to 8 match the core error codes.
typedef enum DirmStatus {
  DIRM_STATUS_OK = 0,
  DIRM_STATUS_NULL_POINTER = 1,
  DIRM_STATUS_CONFIG = 2,
  DIRM_STATUS_PARSE = 3,
  DIRM_STATUS_INVALID_BOX = 4,
  DIRM_STATUS_SHAPE = 5,
  DIRM_STATUS_NON_FINITE_LOSS = 6,
  DIRM_STATUS_IO = 7,
  DIRM_STATUS_JSON = 8,
  DIRM_STATUS_INVALID_ARGUMENT = 9,
  DIRM_STATUS_OUT_OF_RANGE = 10,
  DIRM_STATUS_PANIC = 11,
} DirmStatus;

// Opaque detection list of one frame.
typedef struct DirmDetections DirmDetections;

// Opaque list of frames.
typedef struct DirmFrames DirmFrames;

// Opaque trained head with the grid and decoding settings it was trained for.
typedef struct DirmModel DirmModel;

// A box: center, extents along its own axes, and yaw in radians.
typedef struct DirmBox {
  double x;
  double y;
  double z;
  double l;
  double w;
  double h;
  double theta;
} DirmBox;

typedef struct DirmDetection {
  uint32_t class_id;
  struct DirmBox bbox;
  double conf;
  // Predicted IoU in [0, 1].
  double iou_pred;
  double score;
} DirmDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Exact rotated bird's-eye-view IoU of two boxes.
//
// # Safety
// All pointers are null or valid.
enum DirmStatus dirm_iou_bev(const struct DirmBox *a, const struct DirmBox *b, double *out);

// 3D IoU: BEV intersection times vertical overlap.
//
// # Safety
// All pointers are null or valid.
enum DirmStatus dirm_iou_3d(const struct DirmBox *a, const struct DirmBox *b, double *out);

// Generates `count` frames with ids `first_id..`. `config` is `key = value`
// text or null for the defaults.
//
// # Safety
// `config` is null or a NUL-terminated string; `out` is valid.
enum DirmStatus dirm_frames_generate(const char *config,
                                     uint64_t seed,
                                     uint64_t first_id,
                                     size_t count,
                                     struct DirmFrames **out);

// Reads a JSON-lines frame file.
//
// # Safety
// `path` is a NUL-terminated string; `out` is valid.
enum DirmStatus dirm_frames_load(const char *path, struct DirmFrames **out);

// Writes frames as JSON lines.
//
// # Safety
// `frames` is a live handle; `path` is a NUL-terminated string.
enum DirmStatus dirm_frames_save(const struct DirmFrames *frames, const char *path);

// Number of frames; 0 for null.
//
// # Safety
// `frames` is null or a live handle.
size_t dirm_frames_len(const struct DirmFrames *frames);

// Number of ground-truth boxes in frame `index`.
//
// # Safety
// `frames` is a live handle; `out` is valid.
enum DirmStatus dirm_frames_box_count(const struct DirmFrames *frames, size_t index, size_t *out);

// Ground-truth box `k` of frame `index` and its class.
//
// # Safety
// `frames` is a live handle; `bbox` and `class_id` are valid.
enum DirmStatus dirm_frames_box(const struct DirmFrames *frames,
                                size_t index,
                                size_t k,
                                struct DirmBox *bbox,
                                uint32_t *class_id);

// # Safety
// `frames` is null or a handle not yet freed.
void dirm_frames_free(struct DirmFrames *frames);

// Loads a checkpoint written by `dirmlab train`.
//
// # Safety
// `path` is a NUL-terminated string; `out` is valid.
enum DirmStatus dirm_model_load(const char *path, struct DirmModel **out);

// Runs the head on frame `index` and decodes its detections.
//
// # Safety
// `model` and `frames` are live handles; `out` is valid.
enum DirmStatus dirm_model_detect(const struct DirmModel *model,
                                  const struct DirmFrames *frames,
                                  size_t index,
                                  struct DirmDetections **out);

// # Safety
// `model` is null or a handle not yet freed.
void dirm_model_free(struct DirmModel *model);

// Number of detections; 0 for null.
//
// # Safety
// `dets` is null or a live handle.
size_t dirm_detections_len(const struct DirmDetections *dets);

// Copies detection `k` (sorted by descending score) into `out`.
//
// # Safety
// `dets` is a live handle; `out` is valid.
enum DirmStatus dirm_detections_get(const struct DirmDetections *dets,
                                    size_t k,
                                    struct DirmDetection *out);

// # Safety
// `dets` is null or a handle not yet freed.
void dirm_detections_free(struct DirmDetections *dets);

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *dirm_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *dirm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIRMLAB_H */
