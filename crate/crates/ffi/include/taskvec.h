#ifndef TASKVEC_H
#define TASKVEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TvStatus {
  TV_STATUS_OK = 0,
  TV_STATUS_NULL_POINTER = 1,
  TV_STATUS_INVALID_ARGUMENT = 2,
  TV_STATUS_DIMENSION_TOO_SMALL = 3,
  TV_STATUS_DEGENERATE_NORM = 4,
  TV_STATUS_IO = 5,
  TV_STATUS_FORMAT = 6,
  TV_STATUS_CONFIG = 7,
  TV_STATUS_DIVERGED = 8,
  TV_STATUS_BUFFER_TOO_SMALL = 9,
  TV_STATUS_PANIC = 10,
} TvStatus;

typedef struct TvBasis TvBasis;

typedef struct TvDictionary TvDictionary;

typedef struct TvParams TvParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *tv_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *tv_version(void);

/**
 * Random orthonormal concept basis in R^d with `num_tasks` task/label
 * pairs and `num_common` common directions.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum TvStatus tv_basis_new(size_t d,
                           size_t num_tasks,
                           size_t num_common,
                           uint64_t seed,
                           struct TvBasis **out);

/**
 * # Safety
 * `basis` must be null or a handle from this library not yet freed.
 */
void tv_basis_free(struct TvBasis *basis);

/**
 * Ambient dimension, or 0 for a null handle.
 *
 * # Safety
 * `basis` must be null or a live handle.
 */
size_t tv_basis_dim(const struct TvBasis *basis);

/**
 * Copy task direction `a_k` into `out` (at least `d` values).
 *
 * # Safety
 * `basis` must be a live handle and `out` must hold `len` doubles.
 */
enum TvStatus tv_basis_task_vector(const struct TvBasis *basis, size_t k, double *out, size_t len);

/**
 * # Safety
 * `basis` must be a live handle and `path` a nul-terminated string.
 */
enum TvStatus tv_basis_save(const struct TvBasis *basis, const char *path);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum TvStatus tv_basis_load(const char *path, struct TvBasis **out);

/**
 * Output dictionary over `basis` with anchor coefficient `anchor`.
 *
 * # Safety
 * `basis` must be a live handle and `out` writable.
 */
enum TvStatus tv_dictionary_new(const struct TvBasis *basis,
                                double anchor,
                                struct TvDictionary **out);

/**
 * # Safety
 * `dict` must be null or a live handle.
 */
void tv_dictionary_free(struct TvDictionary *dict);

/**
 * Number of tokens, or 0 for a null handle.
 *
 * # Safety
 * `dict` must be null or a live handle.
 */
size_t tv_dictionary_len(const struct TvDictionary *dict);

/**
 * Copy token `index` into `out` (at least `d` values).
 *
 * # Safety
 * `dict` must be a live handle and `out` must hold `len` doubles.
 */
enum TvStatus tv_dictionary_token(const struct TvDictionary *dict,
                                  size_t index,
                                  double *out,
                                  size_t len);

/**
 * # Safety
 * `dict` must be a live handle and `path` a nul-terminated string.
 */
enum TvStatus tv_dictionary_save(const struct TvDictionary *dict, const char *path);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum TvStatus tv_dictionary_load(const char *path, struct TvDictionary **out);

/**
 * Initial weights: `W_K`, `W_Q` entries N(0, sigma0^2), `W_V` N(0, sigma1^2).
 *
 * # Safety
 * `out` must be writable.
 */
enum TvStatus tv_params_init(size_t d,
                             double sigma0,
                             double sigma1,
                             uint64_t seed,
                             struct TvParams **out);

/**
 * # Safety
 * `params` must be null or a live handle.
 */
void tv_params_free(struct TvParams *params);

/**
 * Model dimension, or 0 for a null handle.
 *
 * # Safety
 * `params` must be null or a live handle.
 */
size_t tv_params_dim(const struct TvParams *params);

/**
 * # Safety
 * `params` must be a live handle and `path` a nul-terminated string.
 */
enum TvStatus tv_params_save(const struct TvParams *params, const char *path);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum TvStatus tv_params_load(const char *path, struct TvParams **out);

/**
 * Forward pass on `num_tokens` row-major token vectors of length `d`; the
 * last row is the query. Writes one logit per dictionary token and the
 * predicted index.
 *
 * # Safety
 * `tokens` must hold `num_tokens * d` doubles, `logits` must hold
 * `logits_len` doubles, and `predicted` must be writable.
 */
enum TvStatus tv_forward(const struct TvParams *params,
                         const struct TvDictionary *dict,
                         const double *tokens,
                         size_t num_tokens,
                         size_t d,
                         double *logits,
                         size_t logits_len,
                         size_t *predicted);

/**
 * Run an experiment from a JSON config string into `out_dir`.
 *
 * # Safety
 * Both arguments must be nul-terminated strings.
 */
enum TvStatus tv_run_experiment(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TASKVEC_H */
