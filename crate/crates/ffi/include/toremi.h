#ifndef TOREMI_H
#define TOREMI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ToremiStatus {
  TOREMI_STATUS_OK = 0,
  TOREMI_STATUS_NULL_POINTER = 1,
  TOREMI_STATUS_INVALID_UTF8 = 2,
  TOREMI_STATUS_INVALID_ARGUMENT = 3,
  TOREMI_STATUS_INVALID_CONFIG = 4,
  TOREMI_STATUS_NON_FINITE_LOSS = 5,
  TOREMI_STATUS_EMPTY_INTERVAL = 6,
  TOREMI_STATUS_PANIC = 7,
} ToremiStatus;

typedef enum ToremiStage {
  TOREMI_STAGE_STAGE1 = 1,
  TOREMI_STAGE_STAGE2 = 2,
} ToremiStage;

/**
 * Opaque handle.
 */
typedef struct ToremiReweighter ToremiReweighter;

/**
 * Reweighter settings. `literal_below_average` selects the signed Stage-2
 * update for topics at or below the average loss (0 = magnitude).
 */
typedef struct ToremiConfig {
  double alpha;
  double beta;
  double gamma;
  uint64_t interval_steps;
  uint64_t transition_step;
  int32_t literal_below_average;
} ToremiConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The default settings: alpha 1, beta 5, gamma 0.1, intervals of 100 steps,
 * transition at step 4000.
 */
struct ToremiConfig toremi_config_default(void);

/**
 * Creates a reweighter. On success `*out` owns a handle to release with
 * `toremi_reweighter_free`.
 *
 * # Safety
 * `config` must be readable and `out` writable.
 */
enum ToremiStatus toremi_reweighter_new(const struct ToremiConfig *config,
                                        struct ToremiReweighter **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `handle` must come from `toremi_reweighter_new` and not be used again.
 */
void toremi_reweighter_free(struct ToremiReweighter *handle);

/**
 * Adds one sample's raw loss to the open interval.
 *
 * # Safety
 * `sample_id` and each of the `n_labels` entries of `labels` must be
 * NUL-terminated strings.
 */
enum ToremiStatus toremi_record_sample(struct ToremiReweighter *handle,
                                       const char *sample_id,
                                       const char *const *labels,
                                       size_t n_labels,
                                       double raw_loss);

/**
 * Marks the end of a training step.
 *
 * # Safety
 * `handle` must be a live handle.
 */
enum ToremiStatus toremi_end_step(struct ToremiReweighter *handle);

/**
 * Closes the open interval with the scheduled stage and updates the
 * weights. `out_stage` may be NULL.
 *
 * # Safety
 * `handle` must be a live handle; `out_stage` NULL or writable.
 */
enum ToremiStatus toremi_finalize(struct ToremiReweighter *handle, enum ToremiStage *out_stage);

/**
 * `min(product of the label weights, beta)` for a sample with `labels`.
 *
 * # Safety
 * As for `toremi_record_sample`; `out` must be writable.
 */
enum ToremiStatus toremi_multiplier(const struct ToremiReweighter *handle,
                                    const char *const *labels,
                                    size_t n_labels,
                                    double *out);

/**
 * Current weight of `label`; 1 for labels never seen.
 *
 * # Safety
 * `label` must be a NUL-terminated string and `out` writable.
 */
enum ToremiStatus toremi_weight(const struct ToremiReweighter *handle,
                                const char *label,
                                double *out);

/**
 * Number of intervals finalized so far.
 *
 * # Safety
 * `out` must be writable.
 */
enum ToremiStatus toremi_finalized_intervals(const struct ToremiReweighter *handle, uint64_t *out);

/**
 * Stage that governs the interval ending at `step`.
 *
 * # Safety
 * `config` must be readable and `out` writable.
 */
enum ToremiStatus toremi_stage_for_step(const struct ToremiConfig *config,
                                        uint64_t step,
                                        enum ToremiStage *out);

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call on the same thread.
 */
const char *toremi_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOREMI_H */
