#ifndef TGROW_H
#define TGROW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TgStatus {
  TG_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TG_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  TG_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed JSON, bad shapes or out-of-range values.
   */
  TG_STATUS_INVALID_ARGUMENT = 3,
  TG_STATUS_IO = 4,
  /**
   * Not a readable checkpoint.
   */
  TG_STATUS_BAD_CHECKPOINT = 5,
  /**
   * A plan step could not be applied.
   */
  TG_STATUS_SCHEDULE = 6,
  /**
   * The plan fills constrained blocks and `allow_unsafe` was false.
   */
  TG_STATUS_UNSAFE_PLAN = 7,
  /**
   * The output buffer is too small; the required length was written back.
   */
  TG_STATUS_BUFFER_TOO_SMALL = 8,
  TG_STATUS_PANIC = 9,
} TgStatus;

/**
 * Opaque model handle.
 */
typedef struct TgModel TgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *tg_last_error(void);

/**
 * Initializes a model from a JSON config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TgStatus tg_model_init(const char *config_json,
                            uint64_t seed,
                            double stddev,
                            struct TgModel **out);

/**
 * Reads a `.tgrw` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TgStatus tg_model_load(const char *path, struct TgModel **out);

/**
 * Writes a `.tgrw` checkpoint atomically.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum TgStatus tg_model_save(const struct TgModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tg_model_free(struct TgModel *model);

/**
 * Total number of scalar parameters.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum TgStatus tg_model_param_count(const struct TgModel *model, uint64_t *out);

/**
 * The model config as JSON. Free the string with `tg_string_free`.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum TgStatus tg_model_config_json(const struct TgModel *model, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void tg_string_free(char *s);

/**
 * Runs the model on `len` tokens and writes the `len x out_dim` logits
 * row-major into `out`. `*out_len` holds the buffer capacity on entry and
 * the number of values needed on return.
 *
 * # Safety
 * `tokens` must point to `len` values, `out` to `*out_len` writable values.
 */
enum TgStatus tg_model_forward(const struct TgModel *model,
                               const uint32_t *tokens,
                               size_t len,
                               double *out,
                               size_t *out_len);

/**
 * Applies a JSON plan and returns the expanded model as a new handle; the
 * input handle is left untouched.
 *
 * # Safety
 * `model` must be a live handle, `plan_json` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum TgStatus tg_model_apply_plan(const struct TgModel *model,
                                  const char *plan_json,
                                  bool allow_unsafe,
                                  struct TgModel **out);

/**
 * Compares two models on `inputs` sampled sequences. Writes the largest
 * absolute logit difference and whether it is within `tol`.
 *
 * # Safety
 * `a` and `b` must be live handles; `max_abs` and `pass` valid pointers.
 */
enum TgStatus tg_model_verify(const struct TgModel *a,
                              const struct TgModel *b,
                              size_t inputs,
                              uint64_t seed,
                              double tol,
                              double *max_abs,
                              bool *pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TGROW_H */
