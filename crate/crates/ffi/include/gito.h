#ifndef GITO_H
#define GITO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum GitoStatus {
  GITO_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GITO_STATUS_NULL = 1,
  /**
   * Bad argument, config or file contents.
   */
  GITO_STATUS_INVALID = 2,
  GITO_STATUS_IO = 3,
  /**
   * Array lengths or channel counts do not match.
   */
  GITO_STATUS_SHAPE = 4,
  /**
   * An internal panic was caught.
   */
  GITO_STATUS_PANIC = 5,
} GitoStatus;

/**
 * Loaded model (f32 or f64, as stored in the checkpoint).
 */
typedef struct GitoModel GitoModel;

/**
 * Input functions and query points for one prediction.
 */
typedef struct GitoSample GitoSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread. Valid until the next
 * failing call on the same thread; never null.
 */
const char *gito_last_error(void);

/**
 * Loads a checkpoint written by `gito train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum GitoStatus gito_model_load(const char *path, struct GitoModel **out);

/**
 * # Safety
 * `model` must be null or come from [`gito_model_load`], freed once.
 */
void gito_model_free(struct GitoModel *model);

/**
 * Trainable parameter count.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum GitoStatus gito_model_param_count(const struct GitoModel *model, size_t *out);

/**
 * Output fields predicted per query point.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum GitoStatus gito_model_out_channels(const struct GitoModel *model, size_t *out);

/**
 * Empty sample in `coord_dim` dimensions.
 *
 * # Safety
 * `out` must be writable.
 */
enum GitoStatus gito_sample_new(size_t coord_dim, struct GitoSample **out);

/**
 * Appends an input function: `coords` is `[n_points, coord_dim]`,
 * `values` is `[n_points, channels]`, both row-major.
 *
 * # Safety
 * `sample` must be live; the arrays must hold the stated lengths.
 */
enum GitoStatus gito_sample_add_input(struct GitoSample *sample,
                                      const double *coords,
                                      size_t n_points,
                                      const double *values,
                                      size_t channels);

/**
 * Sets the query points, `[n_queries, coord_dim]` row-major.
 *
 * # Safety
 * `sample` must be live; `coords` must hold `n_queries * coord_dim` values.
 */
enum GitoStatus gito_sample_set_queries(struct GitoSample *sample,
                                        const double *coords,
                                        size_t n_queries);

/**
 * # Safety
 * `sample` must be null or come from [`gito_sample_new`], freed once.
 */
void gito_sample_free(struct GitoSample *sample);

/**
 * Predicts `[n_queries, out_channels]` physical-unit values into `out`,
 * which holds `out_len` doubles. `written` receives the count.
 *
 * # Safety
 * Handles must be live; `out` must hold `out_len` doubles.
 */
enum GitoStatus gito_model_predict(const struct GitoModel *model,
                                   const struct GitoSample *sample,
                                   double *out,
                                   size_t out_len,
                                   size_t *written);

/**
 * Per-channel relative L2 of `pred` against `truth` (both `len` values,
 * `channels` interleaved). `per_channel` may be null; otherwise it
 * receives `channels` values.
 *
 * # Safety
 * Arrays must hold the stated lengths; `mean` must be writable.
 */
enum GitoStatus gito_relative_l2(const double *pred,
                                 const double *truth,
                                 size_t len,
                                 size_t channels,
                                 double *per_channel,
                                 double *mean);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GITO_H */
