#ifndef LCSLAB_H
#define LCSLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  LCS_STATUS_OK = 0,
  LCS_STATUS_NULL_POINTER = 1,
  LCS_STATUS_CONFIG = 2,
  LCS_STATUS_NUMERIC = 3,
  LCS_STATUS_IO = 4,
  LCS_STATUS_INVALID = 5,
  LCS_STATUS_BUFFER_TOO_SMALL = 6,
  LCS_STATUS_PANIC = 7,
} LcsStatus;

/**
 * A dataset with its ground-truth latents when it was generated.
 */
typedef struct LcsDataset LcsDataset;

/**
 * A trained or loaded VAE.
 */
typedef struct LcsModel LcsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to fit) and returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t lcs_last_error(char *buf, size_t cap);

/**
 * Samples a dataset from a JSON structural model config.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
LcsStatus lcs_dataset_generate(const char *config_json, LcsDataset **out);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must come from this library and not be used afterwards.
 */
void lcs_dataset_free(LcsDataset *ds);

/**
 * Row count, observation width and number of domains.
 *
 * # Safety
 * `ds` must be a live handle; the out pointers must be valid.
 */
LcsStatus lcs_dataset_shape(const LcsDataset *ds, size_t *rows, size_t *d_x, size_t *num_domains);

/**
 * Copies observations (`rows × d_x`) and domain ids (`rows`).
 *
 * # Safety
 * `x` must hold `x_cap` doubles and `domains` `domains_cap` sizes.
 */
LcsStatus lcs_dataset_copy(const LcsDataset *ds,
                           double *x,
                           size_t x_cap,
                           size_t *domains,
                           size_t domains_cap);

/**
 * Trains a VAE on `ds` with a JSON training config.
 *
 * # Safety
 * `ds` must be live, `train_json` NUL-terminated and `out` valid.
 */
LcsStatus lcs_model_train(const LcsDataset *ds,
                          const char *train_json,
                          size_t d_c,
                          size_t d_s,
                          LcsModel **out);

/**
 * Loads a checkpoint written by `lcslab train`.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
LcsStatus lcs_model_load(const char *path, LcsModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void lcs_model_free(LcsModel *model);

/**
 * Number of doubles one prediction fills: 1 for regression, else the class count.
 *
 * # Safety
 * `model` must be live and `width` valid.
 */
LcsStatus lcs_model_output_width(const LcsModel *model, size_t *width);

/**
 * Predicts `n` rows of `x` (`n × d_x`) from domains `domains`, writing
 * `n × width` doubles to `out`.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
LcsStatus lcs_model_predict(const LcsModel *model,
                            const double *x,
                            size_t n,
                            size_t d_x,
                            const size_t *domains,
                            double *out,
                            size_t out_cap);

/**
 * MCC between the model's content posterior means and the dataset's true content.
 *
 * # Safety
 * Handles must be live and `mcc` valid.
 */
LcsStatus lcs_model_content_mcc(const LcsModel *model, const LcsDataset *ds, double *mcc);

/**
 * Mean absolute correlation after optimal matching of `n × d` matrices.
 *
 * # Safety
 * `truth` and `estimate` must hold `n × d` doubles.
 */
LcsStatus lcs_mcc(const double *truth, const double *estimate, size_t n, size_t d, double *mcc);

/**
 * `KL(p ‖ q)` for two categorical distributions of length `c`.
 *
 * # Safety
 * `p` and `q` must hold `c` doubles.
 */
LcsStatus lcs_label_kl(const double *p, const double *q, size_t c, double *kl);

/**
 * Solves for `k` label marginals over `c` classes whose pairwise KL is
 * `target_kl`, writing them as `k × c` doubles.
 *
 * # Safety
 * `out` must hold `out_cap` doubles; `max_residual` may be null.
 */
LcsStatus lcs_solve_marginals(size_t k,
                              size_t c,
                              double target_kl,
                              uint64_t seed,
                              double *out,
                              size_t out_cap,
                              double *max_residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCSLAB_H */
