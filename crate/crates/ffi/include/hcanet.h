#ifndef HCANET_H
#define HCANET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HcaStatus {
  HCA_STATUS_OK = 0,
  HCA_STATUS_NULL_POINTER = 1,
  HCA_STATUS_INVALID_ARGUMENT = 2,
  HCA_STATUS_IO = 3,
  HCA_STATUS_INGESTION = 4,
  HCA_STATUS_VERSION_MISMATCH = 5,
  HCA_STATUS_SHAPE = 6,
  HCA_STATUS_RUNTIME = 7,
  HCA_STATUS_PANIC = 8,
} HcaStatus;

// Opaque model handle.
typedef struct HcaModel HcaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum HcaStatus hca_model_load(const char *path, struct HcaModel **out);

// Releases a handle from [`hca_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void hca_model_free(struct HcaModel *model);

// Network input height and width.
//
// # Safety
// All pointers must be valid.
enum HcaStatus hca_model_input_size(const struct HcaModel *model, size_t *height, size_t *width);

// Number of disc channels the model predicts.
//
// # Safety
// All pointers must be valid.
enum HcaStatus hca_model_num_discs(const struct HcaModel *model, size_t *out);

// Predicts discs for a row-major `height x width` image in `[0, 1]`.
// Coordinates are in the input image's pixels; undetected discs get
// `(-1, -1)` and `visible = 0`. Every output array holds `len` entries,
// which must equal the model's disc count.
//
// # Safety
// `pixels` must hold `height * width` values; each output array `len`.
enum HcaStatus hca_model_predict(const struct HcaModel *model,
                                 const double *pixels,
                                 size_t height,
                                 size_t width,
                                 double threshold,
                                 double *rows,
                                 double *cols,
                                 double *confidence,
                                 uint8_t *visible,
                                 size_t len);

// Message for the last failed call on this thread; empty after success.
// Valid until the next call on the same thread.
const char *hca_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hca_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HCANET_H */
