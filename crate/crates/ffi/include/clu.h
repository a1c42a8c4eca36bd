#ifndef CLU_H
#define CLU_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CluStatus {
  CLU_STATUS_OK = 0,
  CLU_STATUS_NULL_POINTER = 1,
  CLU_STATUS_INVALID_UTF8 = 2,
  CLU_STATUS_INVALID_ARGUMENT = 3,
  CLU_STATUS_CONFIG = 4,
  CLU_STATUS_NUMERICAL = 5,
  CLU_STATUS_IO = 6,
  CLU_STATUS_PANIC = 7,
} CluStatus;

/**
 * Reservoir memory buffer.
 */
typedef struct CluBuffer CluBuffer;

/**
 * Parsed experiment configuration.
 */
typedef struct CluExperiment CluExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from this thread.
 */
const char *clu_last_error(void);

/**
 * Library version as a static string.
 */
const char *clu_version(void);

/**
 * Releases a string produced by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void clu_string_free(char *s);

/**
 * Learning coefficients for `n` detached losses at outer step `k` of `total`.
 *
 * # Safety
 * `losses` and `out` must point to `n` doubles.
 */
enum CluStatus clu_coeffs_learn(const double *losses,
                                size_t n,
                                size_t k,
                                size_t total,
                                double lambda,
                                double *out);

/**
 * Unlearning coefficients; see [`clu_coeffs_learn`].
 *
 * # Safety
 * `losses` and `out` must point to `n` doubles.
 */
enum CluStatus clu_coeffs_unlearn(const double *losses,
                                  size_t n,
                                  size_t k,
                                  size_t total,
                                  double lambda,
                                  double *out);

/**
 * Writes 1 where `task_abs[i] / remain_abs[i] >= gamma`, else 0.
 *
 * # Safety
 * `task_abs` and `remain_abs` must point to `n` doubles, `out` to `n` bytes.
 */
enum CluStatus clu_saliency_mask(const double *task_abs,
                                 const double *remain_abs,
                                 size_t n,
                                 double gamma,
                                 uint8_t *out);

/**
 * `out = (1 - alpha) * theta + alpha * theta_r`.
 *
 * # Safety
 * All three pointers must reference `n` doubles; `out` may alias either input.
 */
enum CluStatus clu_slow_step(const double *theta,
                             const double *theta_r,
                             size_t n,
                             double alpha,
                             double *out);

/**
 * New empty buffer.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum CluStatus clu_buffer_new(size_t capacity, uint64_t seed, struct CluBuffer **out);

/**
 * Offers one sample to the reservoir.
 *
 * # Safety
 * `buffer` must be live; `features` must point to `dim` doubles.
 */
enum CluStatus clu_buffer_observe(struct CluBuffer *buffer,
                                  uint64_t id,
                                  size_t label,
                                  const double *features,
                                  size_t dim);

/**
 * Number of stored samples; 0 for a null handle.
 *
 * # Safety
 * `buffer` must be live or null.
 */
size_t clu_buffer_len(const struct CluBuffer *buffer);

/**
 * Whether a sample id is currently stored.
 *
 * # Safety
 * `buffer` must be live or null.
 */
bool clu_buffer_contains(const struct CluBuffer *buffer, uint64_t id);

/**
 * Removes every stored sample of the given classes and refuses them later.
 * `removed` (optional) receives the count.
 *
 * # Safety
 * `buffer` must be live; `classes` must point to `n` entries.
 */
enum CluStatus clu_buffer_erase_classes(struct CluBuffer *buffer,
                                        const size_t *classes,
                                        size_t n,
                                        size_t *removed);

/**
 * Removes the given sample ids and refuses them later.
 *
 * # Safety
 * `buffer` must be live; `ids` must point to `n` entries.
 */
enum CluStatus clu_buffer_erase_samples(struct CluBuffer *buffer,
                                        const uint64_t *ids,
                                        size_t n,
                                        size_t *removed);

/**
 * # Safety
 * `buffer` must come from [`clu_buffer_new`] and not be used afterwards.
 */
void clu_buffer_free(struct CluBuffer *buffer);

/**
 * Parses and validates a TOML experiment configuration.
 *
 * # Safety
 * `toml` must be a nul-terminated string; `out` a valid handle slot.
 */
enum CluStatus clu_experiment_from_toml(const char *toml, struct CluExperiment **out);

/**
 * Runs one seed and returns its metrics as JSON.
 *
 * # Safety
 * `exp` must be live; `json` a valid string slot.
 */
enum CluStatus clu_experiment_run_seed(const struct CluExperiment *exp, uint64_t seed, char **json);

/**
 * # Safety
 * `exp` must come from [`clu_experiment_from_toml`] and not be used afterwards.
 */
void clu_experiment_free(struct CluExperiment *exp);

/**
 * Runs the numerical theory checks (`all` adds gradient checks) and returns
 * the report as JSON. `passed` (optional) receives the overall verdict.
 *
 * # Safety
 * `json` must be a valid string slot; `passed` valid or null.
 */
enum CluStatus clu_verify(uint64_t seed, bool all, bool *passed, char **json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLU_H */
