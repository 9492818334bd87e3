#ifndef BIGS_H
#define BIGS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Block layout selector for [`bigs_model_new_toy`].
 */
typedef enum BigsArch {
  BIGS_ARCH_GATED = 0,
  BIGS_ARCH_STACKED = 1,
} BigsArch;

/**
 * Token routing selector for [`bigs_model_new_toy`].
 */
typedef enum BigsRouting {
  BIGS_ROUTING_SSM = 0,
  BIGS_ROUTING_ATTENTION = 1,
} BigsRouting;

/**
 * Result code of every fallible call.
 */
typedef enum BigsStatus {
  BIGS_STATUS_OK = 0,
  BIGS_STATUS_NULL_POINTER = 1,
  BIGS_STATUS_INVALID_ARGUMENT = 2,
  BIGS_STATUS_IO = 3,
  BIGS_STATUS_FORMAT = 4,
  BIGS_STATUS_NUMERIC = 5,
  BIGS_STATUS_UNSUPPORTED = 6,
  BIGS_STATUS_BUFFER_TOO_SMALL = 7,
  BIGS_STATUS_PANIC = 8,
} BigsStatus;

/**
 * Opaque model.
 */
typedef struct BigsModel BigsModel;

/**
 * Opaque diagonal SSM.
 */
typedef struct BigsSsm BigsSsm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *bigs_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bigs_version(void);

/**
 * S4D-initialized SSM with `n_state` states (even) and a step drawn log-uniformly in `[dt_min, dt_max]`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum BigsStatus bigs_ssm_new_s4d(size_t n_state,
                                 double dt_min,
                                 double dt_max,
                                 uint64_t seed,
                                 struct BigsSsm **out);

/**
 * SSM from explicit diagonal parameters, each array of length `modes`.
 * `conjugate_pairs != 0` makes each state stand for a conjugate pair.
 *
 * # Safety
 * All arrays must hold `modes` values; `out` must be writable.
 */
enum BigsStatus bigs_ssm_new_diagonal(size_t modes,
                                      const double *lambda_re,
                                      const double *lambda_im,
                                      const double *b_re,
                                      const double *b_im,
                                      const double *c_re,
                                      const double *c_im,
                                      double d,
                                      double dt,
                                      int32_t conjugate_pairs,
                                      struct BigsSsm **out);

/**
 * Release an SSM handle. Null is ignored.
 *
 * # Safety
 * `ssm` must come from a `bigs_ssm_new_*` call and not be used afterwards.
 */
void bigs_ssm_free(struct BigsSsm *ssm);

/**
 * Write the first `len` kernel taps into `out`.
 *
 * # Safety
 * `ssm` must be a live handle; `out` must hold `len` values.
 */
enum BigsStatus bigs_ssm_kernel(const struct BigsSsm *ssm, size_t len, double *out);

/**
 * Apply the SSM to a length-`len` signal, via FFT convolution (`use_scan == 0`) or recurrence.
 *
 * # Safety
 * `ssm` must be a live handle; `input` and `out` must hold `len` values.
 */
enum BigsStatus bigs_ssm_apply(const struct BigsSsm *ssm,
                               const double *input,
                               size_t len,
                               int32_t use_scan,
                               double *out);

/**
 * Freshly initialized desk-scale model (d = 64, two layers, length 32).
 *
 * # Safety
 * `out` must be writable.
 */
enum BigsStatus bigs_model_new_toy(enum BigsArch arch,
                                   enum BigsRouting routing,
                                   size_t vocab_size,
                                   uint64_t seed,
                                   struct BigsModel **out);

/**
 * Load a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum BigsStatus bigs_model_load(const char *dir, struct BigsModel **out);

/**
 * Write the model as a step-0 checkpoint directory.
 *
 * # Safety
 * `model` must be a live handle; `dir` a NUL-terminated path.
 */
enum BigsStatus bigs_model_save(const struct BigsModel *model, const char *dir);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `bigs_model_new_toy` or `bigs_model_load` and not be used afterwards.
 */
void bigs_model_free(struct BigsModel *model);

/**
 * Vocabulary size, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bigs_model_vocab_size(const struct BigsModel *model);

/**
 * Maximum sequence length, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bigs_model_max_len(const struct BigsModel *model);

/**
 * Analytic parameter total, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bigs_model_param_count(const struct BigsModel *model);

/**
 * MLM logits for one sequence, row-major `[n_tokens, vocab_size]`.
 *
 * # Safety
 * `model` must be a live handle; `tokens` must hold `n_tokens` ids and
 * `logits` `logits_len` values.
 */
enum BigsStatus bigs_model_logits(const struct BigsModel *model,
                                  const uint32_t *tokens,
                                  size_t n_tokens,
                                  double *logits,
                                  size_t logits_len);

/**
 * Re-materialize SSM kernels at a longer maximum length (no new parameters).
 *
 * # Safety
 * `model` must be a live handle.
 */
enum BigsStatus bigs_model_extend(struct BigsModel *model, size_t new_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIGS_H */
