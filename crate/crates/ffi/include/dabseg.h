#ifndef DABSEG_H
#define DABSEG_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum DabsegStatus {
  DABSEG_STATUS_OK = 0,
  DABSEG_STATUS_NULL_POINTER = 1,
  DABSEG_STATUS_INVALID_ARGUMENT = 2,
  DABSEG_STATUS_SHAPE = 3,
  DABSEG_STATUS_IO = 4,
  DABSEG_STATUS_FORMAT = 5,
  DABSEG_STATUS_CONFIG = 6,
  DABSEG_STATUS_DATA = 7,
  DABSEG_STATUS_DIVERGED = 8,
  // A Rust panic was caught at the boundary.
  DABSEG_STATUS_INTERNAL = 9,
} DabsegStatus;

// A multimodal volume with its label map.
typedef struct DabsegCase DabsegCase;

// A trained network loaded from a checkpoint.
typedef struct DabsegModel DabsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`) and returns the full message length.
size_t dabseg_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *dabseg_version(void);

// Synthesizes a phantom case on a `size^3` grid.
enum DabsegStatus dabseg_phantom_new(uint64_t seed, size_t size, struct DabsegCase **out);

// Loads case `index` (in sorted case-id order) of a dataset directory.
enum DabsegStatus dabseg_case_load(const char *root, size_t index, struct DabsegCase **out);

// Releases a case; null is ignored.
void dabseg_case_free(struct DabsegCase *case_);

// Writes the `[D, H, W]` grid size into `dims[0..3]`.
enum DabsegStatus dabseg_case_dims(const struct DabsegCase *case_, size_t *dims);

// Copies the `[4, D, H, W]` intensities (T1, T1ce, T2, FLAIR).
enum DabsegStatus dabseg_case_volume(const struct DabsegCase *case_, double *buf, size_t len);

// Copies the `[D, H, W]` label codes (0, 1, 2, 4).
enum DabsegStatus dabseg_case_labels(const struct DabsegCase *case_, uint8_t *buf, size_t len);

// Creates a motion-degraded copy of `case` with a builtin or file preset.
enum DabsegStatus dabseg_case_degrade(const struct DabsegCase *case_,
                                      const char *preset,
                                      uint64_t seed,
                                      struct DabsegCase **out);

// Loads a training checkpoint (`ckpt_<epoch>.bin`).
enum DabsegStatus dabseg_model_load(const char *path, struct DabsegModel **out);

// Releases a model; null is ignored.
void dabseg_model_free(struct DabsegModel *model);

// Writes the model's `[D, H, W]` patch size into `dims[0..3]`.
enum DabsegStatus dabseg_model_patch_size(const struct DabsegModel *model, size_t *dims);

// Segments a case by non-overlapping tiled inference. `probs` receives
// `[3, D, H, W]` probabilities in (ET, TC, WT) order.
enum DabsegStatus dabseg_model_segment(const struct DabsegModel *model,
                                       const struct DabsegCase *case_,
                                       double *probs,
                                       size_t len);

// Hard Dice of two `[D, H, W]` masks (nonzero bytes are foreground).
enum DabsegStatus dabseg_dice(const uint8_t *pred,
                              const uint8_t *gt,
                              const size_t *dims,
                              double *out);

// 95th-percentile symmetric surface distance in the units of `spacing`.
enum DabsegStatus dabseg_hd95(const uint8_t *pred,
                              const uint8_t *gt,
                              const size_t *dims,
                              const double *spacing,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DABSEG_H */
