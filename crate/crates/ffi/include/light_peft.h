#ifndef LIGHT_PEFT_H
#define LIGHT_PEFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LpftStatus {
  LPFT_STATUS_OK = 0,
  LPFT_STATUS_NULL_POINTER = 1,
  LPFT_STATUS_INVALID_ARGUMENT = 2,
  LPFT_STATUS_CONFIG = 3,
  LPFT_STATUS_IO = 4,
  /**
   * Bad magic, unsupported version or malformed contents.
   */
  LPFT_STATUS_FORMAT = 5,
  LPFT_STATUS_CHECKSUM = 6,
  LPFT_STATUS_COMPATIBILITY = 7,
  LPFT_STATUS_RUNTIME = 8,
  LPFT_STATUS_PANIC = 9,
} LpftStatus;

/**
 * A parsed and validated run configuration.
 */
typedef struct LpftConfig LpftConfig;

/**
 * A model with its PEFT modules, ready for inference.
 */
typedef struct LpftModel LpftModel;

typedef struct LpftParamCounts {
  uint64_t foundation;
  uint64_t classifier;
  uint64_t peft;
  uint64_t trainable;
} LpftParamCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lpft_version(void);

/**
 * Message for the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next library call on the same thread.
 */
const char *lpft_last_error(void);

/**
 * Reads a `key = value` configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LpftStatus lpft_config_load(const char *path, struct LpftConfig **out);

/**
 * Parses configuration text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum LpftStatus lpft_config_parse(const char *text, struct LpftConfig **out);

/**
 * # Safety
 * `config` must come from `lpft_config_load`/`lpft_config_parse` and not be used afterwards. Null is ignored.
 */
void lpft_config_free(struct LpftConfig *config);

/**
 * Runs estimation, pruning, fine-tuning and evaluation, writes the fine-tuned
 * checkpoint to `checkpoint_path` and stores the eval accuracy in `accuracy`.
 *
 * # Safety
 * `config` must be a live handle, `checkpoint_path` a NUL-terminated string and
 * `accuracy` writable.
 */
enum LpftStatus lpft_run_all(const struct LpftConfig *config,
                             const char *checkpoint_path,
                             double *accuracy);

/**
 * Loads a checkpoint of any stage as an inference model.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LpftStatus lpft_model_load(const char *path, struct LpftModel **out);

/**
 * The base checkpoint's pruned foundation with the adapter checkpoint's modules
 * and classifier. Incompatible plans give `LPFT_STATUS_COMPATIBILITY`.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum LpftStatus lpft_model_swap(const char *base_path,
                                const char *adapter_path,
                                struct LpftModel **out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum LpftStatus lpft_model_num_classes(const struct LpftModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum LpftStatus lpft_model_param_counts(const struct LpftModel *model, struct LpftParamCounts *out);

/**
 * Logits for `batch` sequences of `seq` token ids, written row-major into
 * `logits`, which must hold `batch * num_classes` values.
 *
 * # Safety
 * `tokens` must point to `batch * seq` readable values and `logits` to
 * `logits_len` writable values.
 */
enum LpftStatus lpft_model_forward(const struct LpftModel *model,
                                   const uint32_t *tokens,
                                   size_t batch,
                                   size_t seq,
                                   double *logits,
                                   size_t logits_len);

/**
 * # Safety
 * `model` must come from `lpft_model_load`/`lpft_model_swap` and not be used afterwards. Null is ignored.
 */
void lpft_model_free(struct LpftModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIGHT_PEFT_H */
