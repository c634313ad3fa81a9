#ifndef SCREJECT_H
#define SCREJECT_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SCR_SCORE_MSP 0

#define SCR_SCORE_ENTROPY 1

#define SCR_SCORE_DOCTOR 2

#define SCR_SCORE_ENERGY 3

#define SCR_SHIFT_MEAN 0

#define SCR_SHIFT_NONE 1

typedef enum ScrStatus {
  SCR_STATUS_OK = 0,
  SCR_STATUS_INVALID_ARGUMENT = 1,
  SCR_STATUS_INVALID_CONFIG = 2,
  SCR_STATUS_DEGENERATE = 3,
  SCR_STATUS_PARSE = 4,
  SCR_STATUS_FORMAT = 5,
  SCR_STATUS_DIVERGED = 6,
  SCR_STATUS_IO = 7,
  SCR_STATUS_NULL_POINTER = 8,
  SCR_STATUS_OUT_OF_RANGE = 9,
  SCR_STATUS_PANIC = 10,
} ScrStatus;

/**
 * Parsed logit-record file.
 */
typedef struct ScrLogitFile ScrLogitFile;

/**
 * Trained classifier.
 */
typedef struct ScrModel ScrModel;

/**
 * Risk-coverage curve.
 */
typedef struct ScrRcCurve ScrRcCurve;

/**
 * Training settings. `hidden_layers` layers of `hidden_width` units.
 */
typedef struct ScrTrainConfig {
  double alpha;
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  double momentum;
  double weight_decay;
  uint64_t seed;
  size_t hidden_width;
  size_t hidden_layers;
} ScrTrainConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *scr_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *scr_last_error_message(void);

/**
 * Softmax of `k` logits into `out_probs`.
 *
 * # Safety
 * `logits` and `out_probs` must each hold `k` values.
 */
enum ScrStatus scr_softmax(const double *logits, size_t k, double *out_probs);

/**
 * Uncertainty of `k` logits under a softmax score (`SCR_SCORE_*`); higher
 * means less certain.
 *
 * # Safety
 * `logits` must hold `k` values; `out` must be writable.
 */
enum ScrStatus scr_score(uint32_t kind, const double *logits, size_t k, double *out);

/**
 * Negative max entry of the shifted, `p`-normalised logits.
 *
 * # Safety
 * `logits` must hold `k` values; `out` must be writable.
 */
enum ScrStatus scr_maxlogit_norm(const double *logits,
                                 size_t k,
                                 double p,
                                 uint32_t shift,
                                 double *out);

/**
 * Label-smoothing loss of predicted `probs` against `target`, both of
 * length `k`.
 *
 * # Safety
 * `probs` and `target` must hold `k` values; `out` must be writable.
 */
enum ScrStatus scr_loss_ls(const double *probs,
                           const double *target,
                           size_t k,
                           double alpha,
                           double *out);

/**
 * Gradient of the label-smoothing loss with respect to the logits.
 *
 * # Safety
 * `probs`, `target` and `out_grad` must each hold `k` values.
 */
enum ScrStatus scr_grad_ls_logits(const double *probs,
                                  const double *target,
                                  size_t k,
                                  double alpha,
                                  double *out_grad);

/**
 * Builds the risk-coverage curve of `n` predictions. `correct[i]` is
 * nonzero for a correct prediction.
 *
 * # Safety
 * `uncertainty` and `correct` must hold `n` values; `out` must be writable.
 * Release the curve with [`scr_rc_curve_free`].
 */
enum ScrStatus scr_rc_curve_new(const double *uncertainty,
                                const uint8_t *correct,
                                size_t n,
                                struct ScrRcCurve **out);

/**
 * # Safety
 * `curve` must be null or a live curve handle.
 */
void scr_rc_curve_free(struct ScrRcCurve *curve);

/**
 * Number of operating points (distinct thresholds).
 *
 * # Safety
 * `curve` must be a live handle; `out_len` must be writable.
 */
enum ScrStatus scr_rc_curve_len(const struct ScrRcCurve *curve, size_t *out_len);

/**
 * Coverage, risk and threshold of point `i`; any output may be null.
 *
 * # Safety
 * `curve` must be a live handle; non-null outputs must be writable.
 */
enum ScrStatus scr_rc_curve_point(const struct ScrRcCurve *curve,
                                  size_t i,
                                  double *out_coverage,
                                  double *out_risk,
                                  double *out_threshold);

/**
 * # Safety
 * `curve` must be a live handle; `out` must be writable.
 */
enum ScrStatus scr_rc_curve_aurc(const struct ScrRcCurve *curve, double *out);

/**
 * Largest coverage whose selective risk is at most `target_risk`, or 0.
 *
 * # Safety
 * `curve` must be a live handle; `out` must be writable.
 */
enum ScrStatus scr_rc_curve_coverage_at_risk(const struct ScrRcCurve *curve,
                                             double target_risk,
                                             double *out);

/**
 * Risk at the smallest operating point covering at least `target_coverage`.
 *
 * # Safety
 * `curve` must be a live handle; `out` must be writable.
 */
enum ScrStatus scr_rc_curve_risk_at_coverage(const struct ScrRcCurve *curve,
                                             double target_coverage,
                                             double *out);

/**
 * Loads a logit-record file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 * Release the handle with [`scr_logit_file_free`].
 */
enum ScrStatus scr_logit_file_load(const char *path, struct ScrLogitFile **out);

/**
 * # Safety
 * `file` must be null or a live handle.
 */
void scr_logit_file_free(struct ScrLogitFile *file);

/**
 * # Safety
 * `file` must be a live handle; outputs must be writable.
 */
enum ScrStatus scr_logit_file_shape(const struct ScrLogitFile *file,
                                    size_t *out_records,
                                    size_t *out_classes);

/**
 * Copies record `i`: its `k` logits and its label.
 *
 * # Safety
 * `file` must be a live handle; `out_logits` must hold `k` values and
 * `out_label` must be writable.
 */
enum ScrStatus scr_logit_file_record(const struct ScrLogitFile *file,
                                     size_t i,
                                     double *out_logits,
                                     size_t k,
                                     size_t *out_label);

/**
 * RC curve of every record in `file` under a softmax score.
 *
 * # Safety
 * `file` must be a live handle; `out` must be writable.
 */
enum ScrStatus scr_logit_file_rc_curve(const struct ScrLogitFile *file,
                                       uint32_t kind,
                                       struct ScrRcCurve **out);

/**
 * Default training settings.
 */
struct ScrTrainConfig scr_train_config_default(void);

/**
 * Trains a classifier on `n_train` points drawn with `data_seed` from the
 * default eight-class mixture.
 *
 * # Safety
 * `config` must be readable; `out` must be writable. Release the model
 * with [`scr_model_free`].
 */
enum ScrStatus scr_model_train_desk(const struct ScrTrainConfig *config,
                                    size_t n_train,
                                    uint64_t data_seed,
                                    struct ScrModel **out);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
void scr_model_free(struct ScrModel *model);

/**
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum ScrStatus scr_model_shape(const struct ScrModel *model,
                               size_t *out_input_dim,
                               size_t *out_classes);

/**
 * Logits of the model at point `x`.
 *
 * # Safety
 * `model` must be a live handle; `x` must hold `dim` values and
 * `out_logits` `k` values.
 */
enum ScrStatus scr_model_forward(const struct ScrModel *model,
                                 const double *x,
                                 size_t dim,
                                 double *out_logits,
                                 size_t k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCREJECT_H */
