/* C API for the cptlab continual pre-training pipeline. */

#ifndef CPTLAB_H
#define CPTLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every C API call.
 */
typedef enum CptlabStatus {
  CPTLAB_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL or not valid UTF-8.
   */
  CPTLAB_STATUS_INVALID_ARG = 1,
  /**
   * Configuration or input data rejected.
   */
  CPTLAB_STATUS_CONFIG = 2,
  CPTLAB_STATUS_IO = 3,
  /**
   * A pipeline artifact is missing; run the earlier stage first.
   */
  CPTLAB_STATUS_MISSING_ARTIFACT = 4,
  /**
   * Non-finite values or training divergence.
   */
  CPTLAB_STATUS_NUMERIC = 5,
  /**
   * A file did not parse as the expected format.
   */
  CPTLAB_STATUS_FORMAT = 6,
  CPTLAB_STATUS_PANIC = 7,
} CptlabStatus;

/**
 * Opaque pipeline handle: a validated config plus an artifact directory.
 */
typedef struct CptlabPipeline CptlabPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version string of the library; static storage, do not free.
 */
const char *cptlab_version(void);

/**
 * Create a pipeline handle from a config file path and an artifact
 * directory. On success writes the handle to `out` and returns Ok.
 *
 * # Safety
 * `config_path` and `out_dir` must be NUL-terminated strings; `out` must
 * be a valid pointer to a handle slot.
 */
enum CptlabStatus cptlab_pipeline_new(const char *config_path,
                                      const char *out_dir,
                                      struct CptlabPipeline **out);

/**
 * Release a handle created by `cptlab_pipeline_new`.
 *
 * # Safety
 * `p` must be a handle from `cptlab_pipeline_new`, not yet freed; NULL is
 * a no-op.
 */
void cptlab_pipeline_free(struct CptlabPipeline *p);

/**
 * Last error message of a handle; empty string when the previous call
 * succeeded. Valid until the next call on the same handle.
 *
 * # Safety
 * `p` must be a live handle.
 */
const char *cptlab_pipeline_last_error(const struct CptlabPipeline *p);

/**
 * Generate the synthetic bilingual corpora into the artifact directory.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum CptlabStatus cptlab_pipeline_gen_data(struct CptlabPipeline *p);

/**
 * Compute importance scores (pre-training and caching the base model when
 * absent).
 *
 * # Safety
 * `p` must be a live handle.
 */
enum CptlabStatus cptlab_pipeline_score(struct CptlabPipeline *p);

/**
 * Build the freeze mask.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum CptlabStatus cptlab_pipeline_mask(struct CptlabPipeline *p);

/**
 * Continually pre-train on the target corpus.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum CptlabStatus cptlab_pipeline_train(struct CptlabPipeline *p);

/**
 * Evaluate retention and write report.json.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum CptlabStatus cptlab_pipeline_eval(struct CptlabPipeline *p);

/**
 * Run the freezing-ratio sweep and write sweep.tsv / sweep.jsonl.
 *
 * # Safety
 * `p` must be a live handle.
 */
enum CptlabStatus cptlab_pipeline_sweep(struct CptlabPipeline *p);

/**
 * Forgetting/acquisition of the adapted model, read from report.json
 * (run the eval stage first).
 *
 * # Safety
 * `p` must be a live handle; `forgetting_pct` and `acquisition_pct` must
 * be valid writable pointers.
 */
enum CptlabStatus cptlab_pipeline_retention(struct CptlabPipeline *p,
                                            double *forgetting_pct,
                                            double *acquisition_pct);

/**
 * Per-parameter freezing statistics of a mask file, as a JSON string the
 * caller frees with `cptlab_string_free`.
 *
 * # Safety
 * `mask_path` must be a NUL-terminated string; `out_json` a valid pointer.
 */
enum CptlabStatus cptlab_mask_stats_json(const char *mask_path, char **out_json);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must originate from this library and not have been freed; NULL is a
 * no-op.
 */
void cptlab_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPTLAB_H */
