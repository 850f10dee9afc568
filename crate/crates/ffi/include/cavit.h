#ifndef CAVIT_H
#define CAVIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum CavitStatus {
  CAVIT_STATUS_OK = 0,
  CAVIT_STATUS_NULL_POINTER = 1,
  CAVIT_STATUS_INVALID_ARGUMENT = 2,
  CAVIT_STATUS_CONFIG = 3,
  CAVIT_STATUS_SHAPE = 4,
  CAVIT_STATUS_FORMAT = 5,
  CAVIT_STATUS_IO = 6,
  CAVIT_STATUS_BUFFER_TOO_SMALL = 7,
  CAVIT_STATUS_RUNTIME = 8,
  CAVIT_STATUS_PANIC = 9,
} CavitStatus;

/**
 * Values accepted in `CavitConfig::variant`.
 */
typedef enum CavitVariant {
  CAVIT_VARIANT_BASELINE_VIT = 0,
  CAVIT_VARIANT_CAVIT = 1,
  CAVIT_VARIANT_CHANNEL_MHSA = 2,
  CAVIT_VARIANT_CHANNEL_ONLY = 3,
  CAVIT_VARIANT_CLS_SWAPPED = 4,
} CavitVariant;

/**
 * Values accepted in `CavitConfig::cls_projection`.
 */
typedef enum CavitClsProjection {
  CAVIT_CLS_PROJECTION_IDENTITY = 0,
  CAVIT_CLS_PROJECTION_LEARNED_LINEAR = 1,
} CavitClsProjection;

/**
 * Opaque model handle (32-bit weights).
 */
typedef struct CavitModel CavitModel;

/**
 * Model hyperparameters. `variant` and `cls_projection` hold `CavitVariant` and
 * `CavitClsProjection` values; they are plain integers so that any value coming
 * from C can be validated.
 */
typedef struct CavitConfig {
  uint32_t variant;
  size_t image_size;
  size_t patch_size;
  size_t embed_dim;
  size_t depth;
  size_t spatial_heads;
  size_t channel_heads;
  double mlp_ratio;
  size_t n_classes;
  size_t in_channels;
  uint32_t cls_projection;
} CavitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success. The
 * pointer stays valid until the next call into this library on the same thread.
 */
const char *cavit_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cavit_version(void);

/**
 * Write the 32x32 desk preset to `out`.
 *
 * # Safety
 * `out` must be NULL or valid for writes.
 */
enum CavitStatus cavit_config_desk(struct CavitConfig *out);

/**
 * Write the 224x224 tiny-ViT preset to `out`.
 *
 * # Safety
 * `out` must be NULL or valid for writes.
 */
enum CavitStatus cavit_config_paper(struct CavitConfig *out);

/**
 * Create a model with freshly initialized weights.
 *
 * # Safety
 * `config` must be NULL or point to a `CavitConfig`; `out` must be NULL or valid
 * for writes. On success `*out` owns a handle to release with `cavit_model_free`.
 */
enum CavitStatus cavit_model_new(const struct CavitConfig *config,
                                 uint64_t seed,
                                 struct CavitModel **out);

/**
 * Create a model of `config` and fill it from a checkpoint file.
 *
 * # Safety
 * As `cavit_model_new`; `path` must be NULL or a NUL-terminated string.
 */
enum CavitStatus cavit_model_load(const struct CavitConfig *config,
                                  const char *path,
                                  struct CavitModel **out);

/**
 * Write the model's weights as a checkpoint file.
 *
 * # Safety
 * `model` must be NULL or a live handle; `path` NULL or a NUL-terminated string.
 */
enum CavitStatus cavit_model_save(const struct CavitModel *model, const char *path);

/**
 * Copy the model's configuration to `out`.
 *
 * # Safety
 * `model` must be NULL or a live handle; `out` NULL or valid for writes.
 */
enum CavitStatus cavit_model_config(const struct CavitModel *model, struct CavitConfig *out);

/**
 * Logits for `batch` images laid out `[batch, in_channels, image_size, image_size]`
 * row-major, written to `logits` as `[batch, n_classes]`.
 *
 * # Safety
 * `images` must hold `batch * in_channels * image_size^2` floats and `logits`
 * `logits_len` floats.
 */
enum CavitStatus cavit_model_forward(const struct CavitModel *model,
                                     const float *images,
                                     size_t batch,
                                     float *logits,
                                     size_t logits_len);

/**
 * Number of trainable scalars held by the model.
 *
 * # Safety
 * `model` must be NULL or a live handle; `out` NULL or valid for writes.
 */
enum CavitStatus cavit_model_param_count(const struct CavitModel *model, uint64_t *out);

/**
 * Analytic parameter count of `config`.
 *
 * # Safety
 * `config` must be NULL or point to a `CavitConfig`; `out` NULL or valid for writes.
 */
enum CavitStatus cavit_count_params(const struct CavitConfig *config, uint64_t *out);

/**
 * Forward FLOPs (2 x multiply-accumulates) of one image under `config`.
 *
 * # Safety
 * `config` must be NULL or point to a `CavitConfig`; `out` NULL or valid for writes.
 */
enum CavitStatus cavit_count_flops(const struct CavitConfig *config,
                                   bool include_elementwise,
                                   bool include_attention_matmuls,
                                   uint64_t *out);

/**
 * Release a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void cavit_model_free(struct CavitModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAVIT_H */
