#ifndef TCAM_H
#define TCAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call. Nonzero values match the CLI's exit codes where
// they overlap.
typedef enum TcamStatus {
  TCAM_STATUS_OK = 0,
  TCAM_STATUS_CONFIG_ERROR = 2,
  TCAM_STATUS_IO_ERROR = 3,
  TCAM_STATUS_CONTRACT_ERROR = 4,
  TCAM_STATUS_NUMERIC_ERROR = 5,
  TCAM_STATUS_NULL_POINTER = 6,
  TCAM_STATUS_INVALID_ARGUMENT = 7,
  TCAM_STATUS_PANIC = 8,
} TcamStatus;

// Trained or freshly initialized backbone.
typedef struct TcamBackbone TcamBackbone;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *tcam_last_error(void);

// Library version as a static nul-terminated string.
const char *tcam_version(void);

// New backbone with the default architecture, initialized from `seed`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one pointer.
enum TcamStatus tcam_backbone_new(uint64_t seed, struct TcamBackbone **out);

// Loads a default-architecture backbone from a checkpoint file.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum TcamStatus tcam_backbone_load(const char *path, struct TcamBackbone **out);

// Writes the backbone's parameters to a checkpoint file.
//
// # Safety
// `backbone` must come from this library; `path` must be nul-terminated.
enum TcamStatus tcam_backbone_save(const struct TcamBackbone *backbone, const char *path);

// Releases a backbone. Null is ignored.
//
// # Safety
// `backbone` must come from this library and not be used afterwards.
void tcam_backbone_free(struct TcamBackbone *backbone);

// Total stride `s` of the backbone: feature maps are `H/s × W/s`.
//
// # Safety
// `backbone` must come from this library.
uintptr_t tcam_backbone_stride(const struct TcamBackbone *backbone);

// Class probabilities `σ(GAP(f))` of one image into `out_scores[3]`
// (before, after, background).
//
// # Safety
// `rgb` must hold `3·height·width` floats and `out_scores` room for 3.
enum TcamStatus tcam_predict(const struct TcamBackbone *backbone,
                             const float *rgb,
                             uintptr_t height,
                             uintptr_t width,
                             float *out_scores);

// Normalized class activation map of `class` for one image, written to
// `out_map` (`(height/s)·(width/s)` floats, row-major).
//
// # Safety
// `rgb` must hold `3·height·width` floats; `out_map` must hold `out_len`.
enum TcamStatus tcam_cam(const struct TcamBackbone *backbone,
                         const float *rgb,
                         uintptr_t height,
                         uintptr_t width,
                         uint32_t class_,
                         float *out_map,
                         uintptr_t out_len);

// Backward bilinear warp of an `height × width` map in `[0, 1]`:
// `out(p) = map(p + (dx, dy)(p))`, zero outside the grid.
//
// # Safety
// `map`, `dx`, `dy` and `out` must each hold `height·width` floats.
enum TcamStatus tcam_warp(const float *map,
                          const float *dx,
                          const float *dy,
                          uintptr_t height,
                          uintptr_t width,
                          float *out);

// Mean per-image IoU of `count` binary masks (nonzero = set), each
// `height × width`, stored back to back.
//
// # Safety
// `pred` and `gt` must each hold `count·height·width` bytes.
enum TcamStatus tcam_miou(const uint8_t *pred,
                          const uint8_t *gt,
                          uintptr_t count,
                          uintptr_t height,
                          uintptr_t width,
                          double *out);

// Per-pixel grayscale median of `count` RGB frames into `out_gray`
// (`height·width` floats).
//
// # Safety
// `frames` must hold `count·3·height·width` floats, `out_gray` `height·width`.
enum TcamStatus tcam_estimate_background(const float *frames,
                                         uintptr_t count,
                                         uintptr_t height,
                                         uintptr_t width,
                                         float *out_gray);

// Generates a default synthetic before/after dataset into `out_dir`.
//
// # Safety
// `out_dir` must be a nul-terminated string.
enum TcamStatus tcam_generate(const char *out_dir,
                              uintptr_t n_before,
                              uintptr_t n_after,
                              uint64_t seed);

// Trains on the dataset in `train_dir` (validated on `val_dir`, which may
// be null) and writes config, metrics and checkpoint into `out_dir`.
// `config_path` may be null for the defaults. On success `*out` receives
// the trained backbone if `out` is not null.
//
// # Safety
// String arguments must be nul-terminated or null where allowed.
enum TcamStatus tcam_train(const char *train_dir,
                           const char *val_dir,
                           const char *out_dir,
                           const char *config_path,
                           struct TcamBackbone **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCAM_H */
