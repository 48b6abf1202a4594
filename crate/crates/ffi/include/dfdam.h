#ifndef DFDAM_H
#define DFDAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DfdamStatus {
  DFDAM_STATUS_OK = 0,
  DFDAM_STATUS_NULL_ARGUMENT = 1,
  // Bad sizes, labels, configuration or a violated precondition.
  DFDAM_STATUS_INVALID_ARGUMENT = 2,
  // Malformed checkpoint or image bytes.
  DFDAM_STATUS_FORMAT = 3,
  DFDAM_STATUS_IO = 4,
  // Non-finite values during computation.
  DFDAM_STATUS_NUMERICAL = 5,
  // Internal failure; the handle involved should be discarded.
  DFDAM_STATUS_PANIC = 6,
} DfdamStatus;

// Attention values of one forward pass.
typedef struct DfdamAttention DfdamAttention;

// Accumulated pixel confusion counts.
typedef struct DfdamConfusion DfdamConfusion;

// A trained network loaded from a checkpoint.
typedef struct DfdamModel DfdamModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call into this library on the same thread.
const char *dfdam_last_error_message(void);

// Loads a checkpoint written by `dfdam train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DfdamStatus dfdam_model_load(const char *path, struct DfdamModel **out);

// # Safety
// `model` must come from [`dfdam_model_load`] and not be used afterwards.
void dfdam_model_free(struct DfdamModel *model);

// Number of classes predicted by `model`, or 0 when `model` is null.
//
// # Safety
// `model` must be null or a live handle.
size_t dfdam_model_num_classes(const struct DfdamModel *model);

// Width of the fused feature space (length of each channel weight vector),
// or 0 when `model` is null.
//
// # Safety
// `model` must be null or a live handle.
size_t dfdam_model_fusion_channels(const struct DfdamModel *model);

// Segments an interleaved RGB image (`height·width·3` bytes, row major)
// into `labels` (`height·width` bytes).
//
// # Safety
// Buffers must hold the stated number of elements.
enum DfdamStatus dfdam_model_predict(const struct DfdamModel *model,
                                     const uint8_t *rgb,
                                     size_t rgb_len,
                                     size_t height,
                                     size_t width,
                                     uint8_t *labels,
                                     size_t labels_len);

// Runs one forward pass and keeps its attention values.
//
// # Safety
// Buffers must hold the stated number of elements; `out` must be valid.
enum DfdamStatus dfdam_model_attention(const struct DfdamModel *model,
                                       const uint8_t *rgb,
                                       size_t rgb_len,
                                       size_t height,
                                       size_t width,
                                       struct DfdamAttention **out);

// # Safety
// `attention` must come from [`dfdam_model_attention`] and not be used
// afterwards.
void dfdam_attention_free(struct DfdamAttention *attention);

// Size of the position confidence map.
//
// # Safety
// All pointers must be valid.
enum DfdamStatus dfdam_attention_beta_size(const struct DfdamAttention *attention,
                                           size_t *height,
                                           size_t *width);

// Copies the low-level channel weights (fusion-width doubles).
//
// # Safety
// `out` must hold `len` doubles.
enum DfdamStatus dfdam_attention_alpha_low(const struct DfdamAttention *attention,
                                           double *out,
                                           size_t len);

// Copies the high-level channel weights (fusion-width doubles).
//
// # Safety
// `out` must hold `len` doubles.
enum DfdamStatus dfdam_attention_alpha_high(const struct DfdamAttention *attention,
                                            double *out,
                                            size_t len);

// Copies the position confidence map, row major.
//
// # Safety
// `out` must hold `len` doubles.
enum DfdamStatus dfdam_attention_beta(const struct DfdamAttention *attention,
                                      double *out,
                                      size_t len);

// # Safety
// `out` must be valid.
enum DfdamStatus dfdam_confusion_new(size_t classes, struct DfdamConfusion **out);

// # Safety
// `cm` must come from [`dfdam_confusion_new`] and not be used afterwards.
void dfdam_confusion_free(struct DfdamConfusion *cm);

// Adds `len` (prediction, truth) pixel pairs; truth equal to `ignore` is
// skipped. Nothing is added if any label is out of range.
//
// # Safety
// `pred` and `truth` must hold `len` bytes.
enum DfdamStatus dfdam_confusion_accumulate(struct DfdamConfusion *cm,
                                            const uint8_t *pred,
                                            const uint8_t *truth,
                                            size_t len,
                                            uint8_t ignore);

// Mean IoU over classes that occur in the predictions or the truth.
//
// # Safety
// `out` must be valid.
enum DfdamStatus dfdam_confusion_mean_iou(const struct DfdamConfusion *cm, double *out);

// `initial · (1 - iter/max_iter)^power`.
//
// # Safety
// `out` must be valid.
enum DfdamStatus dfdam_poly_lr(double initial,
                               double power,
                               size_t iter,
                               size_t max_iter,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DFDAM_H */
