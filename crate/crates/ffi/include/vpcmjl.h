#ifndef VPCMJL_H
#define VPCMJL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VpStatus {
  VP_STATUS_OK = 0,
  VP_STATUS_CONFIG = 1,
  VP_STATUS_CONTRACT = 2,
  VP_STATUS_DIVERGENCE = 3,
  VP_STATUS_IO = 4,
  VP_STATUS_FORMAT = 5,
  VP_STATUS_SHAPE = 6,
  VP_STATUS_NULL_ARGUMENT = 7,
  VP_STATUS_PANIC = 8,
} VpStatus;

typedef enum VpMode {
  VP_MODE_CLOSED = 0,
  VP_MODE_OPEN = 1,
} VpMode;

typedef enum VpSplit {
  VP_SPLIT_TRAIN = 0,
  VP_SPLIT_VAL = 1,
  VP_SPLIT_TEST = 2,
} VpSplit;

/**
 * Opaque trained model.
 */
typedef struct VpModel VpModel;

/**
 * Opaque synthetic world.
 */
typedef struct VpWorld VpWorld;

typedef struct VpWorldCounts {
  size_t n_attrs;
  size_t n_objs;
  size_t n_seen;
  size_t n_unseen;
  size_t n_train;
  size_t n_val;
  size_t n_test;
  size_t raw_dim;
} VpWorldCounts;

/**
 * Accuracies as fractions in `[0, 1]`.
 */
typedef struct VpMetrics {
  double seen;
  double unseen;
  double hm;
  double auc;
} VpMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on this thread.
 */
const char *vp_last_error(void);

/**
 * Generate a world from a JSON world config (null for defaults).
 *
 * # Safety
 * `config_json` must be null or a nul-terminated string; `out` must be writable.
 */
enum VpStatus vp_world_generate(const char *config_json, struct VpWorld **out);

/**
 * # Safety
 * `dir` must be a nul-terminated path; `out` must be writable.
 */
enum VpStatus vp_world_load(const char *dir, struct VpWorld **out);

/**
 * # Safety
 * `world` must come from this library; `dir` must be a nul-terminated path.
 */
enum VpStatus vp_world_save(const struct VpWorld *world, const char *dir);

/**
 * # Safety
 * `world` must be valid; `out` must be writable.
 */
enum VpStatus vp_world_counts(const struct VpWorld *world, struct VpWorldCounts *out);

/**
 * # Safety
 * `world` must be null or a pointer from this library not yet freed.
 */
void vp_world_free(struct VpWorld *world);

/**
 * Train on `world` with a TOML config (null for defaults) and return the
 * best-validation model. If `out_dir` is non-null, checkpoints and the epoch
 * log are written there.
 *
 * # Safety
 * String arguments must be null or nul-terminated; `world` valid; `out` writable.
 */
enum VpStatus vp_train(const struct VpWorld *world,
                       const char *config_toml,
                       const char *out_dir,
                       struct VpModel **out);

/**
 * Load a checkpoint for use with `world`.
 *
 * # Safety
 * `world` valid; `path` nul-terminated; `out` writable.
 */
enum VpStatus vp_model_load(const struct VpWorld *world, const char *path, struct VpModel **out);

/**
 * Predict the composition of `n` raw feature rows (row-major, `raw_dim` wide).
 * Writes attribute and object indices to `out_attr[n]` and `out_obj[n]`.
 *
 * # Safety
 * `raw` must hold `n * raw_dim` floats; output arrays must hold `n` entries.
 */
enum VpStatus vp_model_predict(const struct VpModel *model,
                               const float *raw,
                               size_t n,
                               size_t raw_dim,
                               enum VpMode mode,
                               double lambda,
                               size_t *out_attr,
                               size_t *out_obj);

/**
 * Score one split of `world` with the calibration-bias sweep.
 *
 * # Safety
 * Pointers must be valid; `out` writable.
 */
enum VpStatus vp_model_evaluate(const struct VpModel *model,
                                const struct VpWorld *world,
                                enum VpSplit split,
                                enum VpMode mode,
                                double lambda,
                                struct VpMetrics *out);

/**
 * # Safety
 * `model` must be null or a pointer from this library not yet freed.
 */
void vp_model_free(struct VpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VPCMJL_H */
