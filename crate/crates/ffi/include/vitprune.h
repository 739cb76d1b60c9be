#ifndef VITPRUNE_H
#define VITPRUNE_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VpStatus {
  VP_STATUS_OK = 0,
  VP_STATUS_NULL_POINTER = 1,
  VP_STATUS_DIMENSION = 2,
  VP_STATUS_FORMAT = 3,
  VP_STATUS_IO = 4,
  VP_STATUS_BUDGET = 5,
  VP_STATUS_CONFIG = 6,
  VP_STATUS_CONVERGENCE = 7,
  VP_STATUS_NON_FINITE = 8,
  VP_STATUS_OTHER = 9,
  VP_STATUS_PANIC = 10,
} VpStatus;

/**
 * Opaque model handle.
 */
typedef struct VpModel VpModel;

/**
 * Architecture description mirrored from the Rust side.
 */
typedef struct VpConfig {
  size_t image_size;
  size_t patch_size;
  size_t embed_dim;
  size_t num_blocks;
  size_t num_heads;
  size_t mlp_hidden;
  size_t num_classes;
  bool qkv_bias;
} VpConfig;

/**
 * Budgets of one block.
 */
typedef struct VpBlockBudget {
  size_t kappa_attn_h;
  size_t kappa_attn_c;
  size_t kappa_mlp_c;
} VpBlockBudget;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into this library on the same thread.
 */
const char *vp_last_error(void);

/**
 * Initializes a fresh model with seeded weights.
 *
 * # Safety
 * `config` must point to a valid `VpConfig`; `out` must be writable.
 */
enum VpStatus vp_model_init(const struct VpConfig *config, uint64_t seed, struct VpModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum VpStatus vp_model_load(const char *path, struct VpModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be nul-terminated.
 */
enum VpStatus vp_model_save(const struct VpModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void vp_model_free(struct VpModel *model);

/**
 * Copies the model's architecture into `out`.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum VpStatus vp_model_config(const struct VpModel *model, struct VpConfig *out);

/**
 * Total stored parameters.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum VpStatus vp_model_count_params(const struct VpModel *model, uint64_t *out);

/**
 * Forward FLOPs per image for the model's actual (possibly compacted) shape.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum VpStatus vp_model_count_flops(const struct VpModel *model, uint64_t *out);

/**
 * Logits for `batch` images of `3 × S × S` values each; `out` receives
 * `batch × num_classes` values.
 *
 * # Safety
 * `images` must hold `images_len` doubles and `out` `out_len` doubles.
 */
enum VpStatus vp_model_logits(const struct VpModel *model,
                              const double *images,
                              size_t images_len,
                              size_t batch,
                              double *out,
                              size_t out_len);

/**
 * Keeps the `kappa` columns of largest L2 norm of a `rows × cols` matrix,
 * zeroing the rest.
 *
 * # Safety
 * `w` and `out` must each hold `rows * cols` doubles.
 */
enum VpStatus vp_project_column_sparse(const double *w,
                                       size_t rows,
                                       size_t cols,
                                       size_t kappa,
                                       double *out);

/**
 * Stationary distribution of an `h × h` column-stochastic matrix by power
 * iteration from the uniform vector.
 *
 * # Safety
 * `p` must hold `h * h` doubles, `scores` `h` doubles; `iterations` may be
 * null.
 */
enum VpStatus vp_power_iteration(const double *p,
                                 size_t h,
                                 double tolerance,
                                 size_t max_iterations,
                                 double *scores,
                                 size_t *iterations);

/**
 * Kendall tau-b between two score vectors of length `n`.
 *
 * # Safety
 * `a` and `b` must each hold `n` doubles; `out` must be writable.
 */
enum VpStatus vp_kendall_tau(const double *a, const double *b, size_t n, double *out);

/**
 * Erdős–Rényi budgets for `ratio` of the parameters removed; `out` must
 * hold `num_blocks` entries.
 *
 * # Safety
 * `config` must be valid; `out` must hold `out_len` entries.
 */
enum VpStatus vp_er_allocate(const struct VpConfig *config,
                             double ratio,
                             struct VpBlockBudget *out,
                             size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VITPRUNE_H */
