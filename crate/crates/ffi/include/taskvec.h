#ifndef TASKVEC_H
#define TASKVEC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TvStatus {
  TV_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8, or a mismatched handle.
   */
  TV_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Invalid configuration or malformed input.
   */
  TV_STATUS_CONFIG = 2,
  /**
   * A file or artifact does not exist.
   */
  TV_STATUS_MISSING = 3,
  /**
   * Training or fine-tuning produced non-finite values.
   */
  TV_STATUS_NUMERICAL = 4,
  /**
   * The output buffer is too small; the required length was written.
   */
  TV_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * Unexpected internal failure.
   */
  TV_STATUS_INTERNAL = 6,
} TvStatus;

/**
 * Base parameters and the task-vector pool built from them.
 */
typedef struct TvPool TvPool;

typedef struct TvState TvState;

typedef struct TvSuite TvSuite;

/**
 * Per-run summary filled by [`tv_train`] and [`tv_state_evaluate`].
 */
typedef struct TvMetrics {
  double avg_accuracy;
  double gated_ratio;
  size_t n_tasks;
} TvMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *tv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tv_version(void);

/**
 * Generate a synthetic suite. Unlisted generator settings take their defaults.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum TvStatus tv_suite_generate(uint64_t seed,
                                size_t n_tasks,
                                size_t dim,
                                size_t classes,
                                double heterogeneity,
                                size_t rank,
                                size_t n_train,
                                size_t n_test,
                                struct TvSuite **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated string; `out` as in [`tv_suite_generate`].
 */
enum TvStatus tv_suite_load(const char *dir, struct TvSuite **out);

/**
 * # Safety
 * `suite` must come from this library; `dir` must be NUL-terminated.
 */
enum TvStatus tv_suite_save(const struct TvSuite *suite, const char *dir);

/**
 * Number of tasks, or 0 for a null handle.
 *
 * # Safety
 * `suite` must be null or come from this library.
 */
size_t tv_suite_n_tasks(const struct TvSuite *suite);

/**
 * # Safety
 * `suite` must be null or a handle not yet freed.
 */
void tv_suite_free(struct TvSuite *suite);

/**
 * Initialize a `dim -> hidden -> classes` base model from `seed`, fine-tune
 * it on every task, and collect the per-tensor task-vector pool.
 *
 * # Safety
 * `suite` must come from this library; `out` as in [`tv_suite_generate`].
 */
enum TvStatus tv_pool_build(const struct TvSuite *suite,
                            uint64_t seed,
                            size_t hidden,
                            size_t steps,
                            double lr,
                            struct TvPool **out);

/**
 * Save the base parameters and the pool as two checkpoints.
 *
 * # Safety
 * `pool` must come from this library; paths must be NUL-terminated.
 */
enum TvStatus tv_pool_save(const struct TvPool *pool,
                           const char *theta_0_path,
                           const char *pool_path);

/**
 * # Safety
 * Paths must be NUL-terminated; `out` as in [`tv_suite_generate`].
 */
enum TvStatus tv_pool_load(const char *theta_0_path, const char *pool_path, struct TvPool **out);

/**
 * # Safety
 * `pool` must be null or come from this library.
 */
size_t tv_pool_n_tasks(const struct TvPool *pool);

/**
 * # Safety
 * `pool` must be null or come from this library.
 */
size_t tv_pool_n_blocks(const struct TvPool *pool);

/**
 * Cumulative singular-value energy of the pool. `*len` receives the curve
 * length even when the buffer is too small.
 *
 * # Safety
 * `out` must hold `cap` doubles; `len` must be null or writable.
 */
enum TvStatus tv_pool_energy(const struct TvPool *pool, double *out, size_t cap, size_t *len);

/**
 * # Safety
 * `pool` must be null or a handle not yet freed.
 */
void tv_pool_free(struct TvPool *pool);

/**
 * Train one regime. `config_toml` is an experiment config in the same
 * format as the CLI's `--config` file; only its `[train]` section is used.
 * Pass null for defaults.
 *
 * # Safety
 * Handles must come from this library; strings must be NUL-terminated;
 * `metrics` must be null or writable.
 */
enum TvStatus tv_train(const struct TvSuite *suite,
                       const struct TvPool *pool,
                       const char *regime,
                       uint64_t seed,
                       const char *config_toml,
                       struct TvState **out,
                       struct TvMetrics *metrics);

/**
 * Evaluate on every task's test split. Per-task accuracies go to
 * `task_accuracies` (capacity `cap`) when it is non-null.
 *
 * # Safety
 * Handles must come from this library; buffers as described.
 */
enum TvStatus tv_state_evaluate(const struct TvState *state,
                                const struct TvSuite *suite,
                                bool hard_gate,
                                struct TvMetrics *metrics,
                                double *task_accuracies,
                                size_t cap);

/**
 * Composition coefficients for `rows` row-major inputs of width `cols`,
 * written row-major as `rows x (n_tasks * n_blocks)`.
 *
 * # Safety
 * `x` must hold `rows * cols` doubles and `out` `cap` doubles.
 */
enum TvStatus tv_state_coefficients(const struct TvState *state,
                                    const double *x,
                                    size_t rows,
                                    size_t cols,
                                    bool hard_gate,
                                    double *out,
                                    size_t cap);

/**
 * # Safety
 * `state` must come from this library; `path` must be NUL-terminated.
 */
enum TvStatus tv_state_save(const struct TvState *state, const char *path);

/**
 * Load a trained state saved by [`tv_state_save`] against `pool`.
 *
 * # Safety
 * `pool` must come from this library; `path` NUL-terminated; `out` writable.
 */
enum TvStatus tv_state_load(const struct TvPool *pool, const char *path, struct TvState **out);

/**
 * # Safety
 * `state` must be null or a handle not yet freed.
 */
void tv_state_free(struct TvState *state);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TASKVEC_H */
