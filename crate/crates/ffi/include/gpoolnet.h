#ifndef GPOOLNET_H
#define GPOOLNET_H

#pragma once

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every call.
typedef enum GpnStatus {
  GPN_STATUS_OK = 0,
  // A required pointer argument was null.
  GPN_STATUS_NULL_ARGUMENT = 1,
  // Invalid architecture, widths or other settings.
  GPN_STATUS_CONFIG = 2,
  // Buffer sizes or matrix shapes do not agree.
  GPN_STATUS_SHAPE = 3,
  // A file could not be parsed.
  GPN_STATUS_FORMAT = 4,
  GPN_STATUS_IO = 5,
  // Any other failure inside the library.
  GPN_STATUS_RUNTIME = 6,
  // The library panicked; the handle should be discarded.
  GPN_STATUS_PANIC = 7,
} GpnStatus;

// Opaque model handle.
typedef struct GpnModel GpnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gpn_version(void);

// Message for the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *gpn_last_error(void);

// Builds a freshly initialized model.
//
// `arch` is one of `gcn_net`, `gcn_gpool_net`, `hconv_net`,
// `hconv_gpool_net`; `channels` points to 4 layer widths.
//
// # Safety
// `arch` must be a NUL-terminated string, `channels` must hold 4 values and
// `out` must be writable.
enum GpnStatus gpn_model_build(const char *arch,
                               const size_t *channels,
                               size_t input_dim,
                               size_t n_classes,
                               uint64_t seed,
                               struct GpnModel **out);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` must be writable.
enum GpnStatus gpn_model_load(const char *path, struct GpnModel **out);

// Writes the model as a checkpoint file without optimizer state.
//
// # Safety
// `model` must come from this library and `path` must be a NUL-terminated
// string.
enum GpnStatus gpn_model_save(const struct GpnModel *model, const char *path);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from this library and must not be used afterwards.
void gpn_model_free(struct GpnModel *model);

// Feature width each node row must have.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum GpnStatus gpn_model_input_dim(const struct GpnModel *model, size_t *out);

// Number of output classes.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum GpnStatus gpn_model_num_classes(const struct GpnModel *model, size_t *out);

// Total scalar parameters and the share held by gPool projections.
//
// # Safety
// `model` must come from this library; both outputs must be writable.
enum GpnStatus gpn_model_param_count(const struct GpnModel *model,
                                     size_t *total,
                                     size_t *gpool_overhead);

// Inference on one graph of `n` nodes.
//
// `adjacency` is `n x n`, symmetric and nonnegative; `features` is
// `n x input_dim`; `logits` receives `n_classes` values.
//
// # Safety
// Buffers must hold the stated number of elements.
enum GpnStatus gpn_model_forward(const struct GpnModel *model,
                                 size_t n,
                                 const double *adjacency,
                                 const double *features,
                                 double *logits,
                                 size_t logits_len);

// A single top-k pooling step.
//
// Scores the `n` rows of `features` (`n x c`) against `projection`
// (length `c`), keeps the `k` best in their original order and writes the
// kept indices (`k`), the induced adjacency (`k x k`) and the pooled,
// optionally `tanh`-gated, features (`k x c`).
//
// # Safety
// Buffers must hold the stated number of elements.
enum GpnStatus gpn_gpool(size_t n,
                         size_t c,
                         const double *adjacency,
                         const double *features,
                         const double *projection,
                         size_t k,
                         bool gate,
                         size_t *out_idx,
                         double *out_adjacency,
                         double *out_features);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GPOOLNET_H */
