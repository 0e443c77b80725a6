#pragma once

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ImblensStatus {
  IMBLENS_STATUS_OK = 0,
  IMBLENS_STATUS_NULL_POINTER = 1,
  IMBLENS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Malformed EMBX directory or invalid tensor contents.
   */
  IMBLENS_STATUS_INVALID_INPUT = 3,
  IMBLENS_STATUS_DIMENSION_MISMATCH = 4,
  IMBLENS_STATUS_EMPTY_INPUT = 5,
  /**
   * Retraining produced a non-finite loss or parameters.
   */
  IMBLENS_STATUS_DIVERGENCE = 6,
  IMBLENS_STATUS_IO = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  IMBLENS_STATUS_PANIC = 8,
} ImblensStatus;

typedef enum ImblensSpace {
  IMBLENS_SPACE_CE = 0,
  IMBLENS_SPACE_FE = 1,
} ImblensSpace;

typedef enum ImblensFeMode {
  IMBLENS_FE_MODE_MAGNITUDE = 0,
  IMBLENS_FE_MODE_CE_ALIGNED = 1,
} ImblensFeMode;

typedef enum ImblensGroupBy {
  IMBLENS_GROUP_BY_PREDICTED = 0,
  IMBLENS_GROUP_BY_TRUE = 1,
} ImblensGroupBy;

/**
 * Opaque feature embedding set.
 */
typedef struct ImblensEmbeddings ImblensEmbeddings;

/**
 * Opaque linear classifier head.
 */
typedef struct ImblensHead ImblensHead;

/**
 * Settings for [`imblens_retrain`]. Start from
 * [`imblens_train_config_default`].
 */
typedef struct ImblensTrainConfig {
  size_t epochs;
  double learning_rate;
  /**
   * Cosine decay target, ignored when `constant_learning_rate` is set.
   */
  double final_learning_rate;
  bool constant_learning_rate;
  double weight_decay;
  uint64_t seed;
  /**
   * Uniform `±1/sqrt(H)` weights instead of zeros.
   */
  bool scaled_uniform_init;
  bool class_balanced_loss;
} ImblensTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null when none failed.
 * Release with [`imblens_string_free`].
 */
char *imblens_last_error_message(void);

/**
 * Forgets the last error recorded on this thread.
 */
void imblens_clear_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void imblens_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *imblens_version(void);

/**
 * Reads an EMBX embeddings directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum ImblensStatus imblens_embeddings_read(const char *dir,
                                           bool allow_signed_fe,
                                           struct ImblensEmbeddings **out);

/**
 * Builds an embedding set from row-major `fe` (`n * h` floats) and `n`
 * labels. The data is copied.
 *
 * # Safety
 * `fe` and `labels` must point to at least `n * h` and `n` elements.
 */
enum ImblensStatus imblens_embeddings_from_raw(const float *fe,
                                               const int64_t *labels,
                                               size_t n,
                                               size_t h,
                                               size_t num_classes,
                                               struct ImblensEmbeddings **out);

/**
 * Writes the set as an EMBX directory.
 *
 * # Safety
 * `es` must be a live handle; `dir` a NUL-terminated string.
 */
enum ImblensStatus imblens_embeddings_write(const struct ImblensEmbeddings *es, const char *dir);

/**
 * Instance count, feature dimension and class count. Any output may be null.
 *
 * # Safety
 * `es` must be a live handle; non-null outputs must be writable.
 */
enum ImblensStatus imblens_embeddings_shape(const struct ImblensEmbeddings *es,
                                            size_t *n,
                                            size_t *h,
                                            size_t *num_classes);

/**
 * # Safety
 * `es` must be null or a handle not yet freed.
 */
void imblens_embeddings_free(struct ImblensEmbeddings *es);

/**
 * Reads an EMBX classifier head directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum ImblensStatus imblens_head_read(const char *dir, struct ImblensHead **out);

/**
 * Builds a head from row-major `weights` (`num_classes * h`) and an
 * optional `bias` of `num_classes` entries (null for none).
 *
 * # Safety
 * Non-null pointers must cover the stated lengths.
 */
enum ImblensStatus imblens_head_from_raw(const float *weights,
                                         const float *bias,
                                         size_t num_classes,
                                         size_t h,
                                         struct ImblensHead **out);

/**
 * Writes the head as an EMBX directory.
 *
 * # Safety
 * `head` must be a live handle; `dir` a NUL-terminated string.
 */
enum ImblensStatus imblens_head_write(const struct ImblensHead *head, const char *dir);

/**
 * Class count, feature dimension and whether a bias is present. Any output
 * may be null.
 *
 * # Safety
 * `head` must be a live handle; non-null outputs must be writable.
 */
enum ImblensStatus imblens_head_shape(const struct ImblensHead *head,
                                      size_t *num_classes,
                                      size_t *h,
                                      bool *has_bias);

/**
 * # Safety
 * `head` must be null or a handle not yet freed.
 */
void imblens_head_free(struct ImblensHead *head);

/**
 * Writes the `n * num_classes` logits (row-major, f64) into `out` and,
 * when `predictions` is non-null, the `n` predicted classes.
 *
 * # Safety
 * `out` must hold `out_len` doubles; `predictions` (if non-null) `n` entries.
 */
enum ImblensStatus imblens_logits(const struct ImblensEmbeddings *es,
                                  const struct ImblensHead *head,
                                  double *out,
                                  size_t out_len,
                                  size_t *predictions);

/**
 * Balanced accuracy of the head's predictions against the set's labels.
 *
 * # Safety
 * Handles must be live; `bac` must be writable.
 */
enum ImblensStatus imblens_accuracy(const struct ImblensEmbeddings *es,
                                    const struct ImblensHead *head,
                                    double *bac);

/**
 * Full accuracy report (per-class recall, confusion matrix) as JSON.
 *
 * # Safety
 * Handles must be live; `out_json` must be writable.
 */
enum ImblensStatus imblens_accuracy_json(const struct ImblensEmbeddings *es,
                                         const struct ImblensHead *head,
                                         char **out_json);

/**
 * Coverage ratios for each of `k_values`, class members and union counts at
 * the largest K, and the top-`contrib_k` logit contributions, as JSON
 * `{"coverage": ..., "contributions": ...}`.
 *
 * # Safety
 * Handles must be live; `k_values` must hold `k_count` entries.
 */
enum ImblensStatus imblens_topk_json(const struct ImblensEmbeddings *es,
                                     const struct ImblensHead *head,
                                     const size_t *k_values,
                                     size_t k_count,
                                     enum ImblensSpace space,
                                     enum ImblensFeMode fe_mode,
                                     enum ImblensGroupBy grouping,
                                     size_t top_m,
                                     size_t contrib_k,
                                     char **out_json);

/**
 * Class mean profiles and weight summaries as JSON
 * `{"profiles": ..., "weights": ...}`.
 *
 * # Safety
 * Handles must be live; `out_json` must be writable.
 */
enum ImblensStatus imblens_stats_json(const struct ImblensEmbeddings *es,
                                      const struct ImblensHead *head,
                                      enum ImblensGroupBy grouping,
                                      float activity_epsilon,
                                      char **out_json);

/**
 * Frobenius divergence and top-`top_m` identity overlap between `train`
 * and the TP/FP partitions of `test`, as JSON.
 *
 * # Safety
 * Handles must be live; `out_json` must be writable.
 */
enum ImblensStatus imblens_divergence_json(const struct ImblensEmbeddings *train,
                                           const struct ImblensEmbeddings *test,
                                           const struct ImblensHead *head,
                                           enum ImblensSpace space,
                                           enum ImblensFeMode fe_mode,
                                           size_t top_m,
                                           size_t k,
                                           char **out_json);

struct ImblensTrainConfig imblens_train_config_default(void);

/**
 * Retrains a head on `train`, keeping the epoch with the best BAC on `eval`
 * (or on `train` when `eval` is null). The training trace is returned as
 * JSON through `out_trace_json` when it is non-null, including on
 * `IMBLENS_STATUS_DIVERGENCE`.
 *
 * # Safety
 * `train` and `config` must be valid; `eval` may be null; `out_head` must
 * be writable.
 */
enum ImblensStatus imblens_retrain(const struct ImblensEmbeddings *train,
                                   const struct ImblensTrainConfig *config,
                                   const struct ImblensEmbeddings *eval,
                                   struct ImblensHead **out_head,
                                   char **out_trace_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
