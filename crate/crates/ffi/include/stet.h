/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef STET_H
#define STET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <stddef.h>

// Result codes shared by every entry point.
typedef enum StetStatus {
  STET_STATUS_OK = 0,
  STET_STATUS_NULL_POINTER = 1,
  STET_STATUS_INVALID_ARGUMENT = 2,
  STET_STATUS_IO = 3,
  STET_STATUS_CONFIG = 4,
  STET_STATUS_DIMENSION = 5,
  STET_STATUS_NUMERIC = 6,
  STET_STATUS_WRONG_HEAD = 7,
  STET_STATUS_PANIC = 8,
  STET_STATUS_OTHER = 9,
} StetStatus;

// Opaque handle to a loaded model.
typedef struct StetModel StetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a checkpoint. On success `*out` receives a handle that must be
// released with [`stet_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum StetStatus stet_model_load(const char *path, struct StetModel **out);

// Releases a handle. Null is accepted and ignored.
//
// # Safety
// `model` must be null or a handle from [`stet_model_load`] not yet freed.
void stet_model_free(struct StetModel *model);

// Window length `t` and channel count `c` expected by the model.
//
// # Safety
// `model` must be a live handle; `t` and `c` writable pointers.
enum StetStatus stet_model_window_shape(const struct StetModel *model, size_t *t, size_t *c);

// Number of values [`stet_model_predict`] writes: classes for a
// classification model, joints for a regression model.
//
// # Safety
// `model` must be a live handle; `n` a writable pointer.
enum StetStatus stet_model_n_outputs(const struct StetModel *model, size_t *n);

// Nonzero when the model has a classification head.
//
// # Safety
// `model` must be null or a live handle.
int stet_model_is_classifier(const struct StetModel *model);

// Runs one normalized window (`t*c` doubles, row-major, time first). Writes
// class probabilities or joint angles into `out`, which must hold
// `out_len >= n_outputs` doubles.
//
// # Safety
// `data` must point to `len` doubles and `out` to `out_len` writable doubles.
enum StetStatus stet_model_predict(const struct StetModel *model,
                                   const double *data,
                                   size_t len,
                                   double *out,
                                   size_t out_len);

// Most probable class for one window.
//
// # Safety
// `data` must point to `len` doubles and `class_out` be writable.
enum StetStatus stet_model_predict_class(const struct StetModel *model,
                                         const double *data,
                                         size_t len,
                                         size_t *class_out);

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library from the same thread.
const char *stet_last_error(void);

// Library version as a static NUL-terminated string.
const char *stet_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STET_H */
