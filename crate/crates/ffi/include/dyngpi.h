#ifndef DYNGPI_H
#define DYNGPI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DgpiStatus {
  DGPI_STATUS_OK = 0,
  DGPI_STATUS_NULL_POINTER = 1,
  DGPI_STATUS_INVALID_ARGUMENT = 2,
  DGPI_STATUS_CONFIG = 3,
  DGPI_STATUS_DATA = 4,
  DGPI_STATUS_ESTIMATION = 5,
  DGPI_STATUS_PANIC = 6,
} DgpiStatus;

/**
 * Estimator settings.
 */
typedef struct DgpiConfig DgpiConfig;

/**
 * A loaded dataset.
 */
typedef struct DgpiDataset DgpiDataset;

/**
 * One cross-fitted estimate.
 */
typedef struct DgpiEstimate DgpiEstimate;

/**
 * Scalar summary of an estimate.
 */
typedef struct DgpiSummary {
  double psi_hat;
  double std_error;
  double ci_low;
  double ci_high;
  size_t n;
  size_t missing_strata;
  size_t overlap_projections;
} DgpiSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 */
size_t dgpi_last_error(char *buf, size_t len);

/**
 * Shifted treatment probability `δp / (δp + 1 − p)`.
 */
enum DgpiStatus dgpi_q_shift(double delta, double p, double *out);

/**
 * Reads a dataset in the native JSON-lines format.
 */
enum DgpiStatus dgpi_dataset_load(const char *path, struct DgpiDataset **out);

/**
 * Assembles a dataset from embeddings, outcomes and treatments files.
 */
enum DgpiStatus dgpi_dataset_ingest(const char *embeddings,
                                    const char *outcomes,
                                    const char *treatments,
                                    struct DgpiDataset **out);

/**
 * Builds a dataset from flat arrays.
 *
 * `lengths[i]` is the segment count of unit `i`; `w` holds the treatments
 * of all units back to back (sum of lengths entries) and `r` the
 * embeddings (sum of lengths times `d_r` entries).
 */
enum DgpiStatus dgpi_dataset_from_arrays(size_t n,
                                         size_t d_r,
                                         size_t s_max,
                                         const size_t *lengths,
                                         const uint8_t *w,
                                         const double *r,
                                         const double *y,
                                         struct DgpiDataset **out);

enum DgpiStatus dgpi_dataset_save(const struct DgpiDataset *ds, const char *path);

/**
 * Number of units; 0 for a null handle.
 */
size_t dgpi_dataset_len(const struct DgpiDataset *ds);

size_t dgpi_dataset_s_max(const struct DgpiDataset *ds);

size_t dgpi_dataset_d_r(const struct DgpiDataset *ds);

void dgpi_dataset_free(struct DgpiDataset *ds);

/**
 * Estimator settings with every default.
 */
enum DgpiStatus dgpi_config_default(struct DgpiConfig **out);

/**
 * Estimator settings from TOML text with the keys of the `[estimator]`
 * table. Unknown keys are rejected.
 */
enum DgpiStatus dgpi_config_from_toml(const char *text, struct DgpiConfig **out);

void dgpi_config_free(struct DgpiConfig *cfg);

/**
 * Cross-fitted estimate at the intervention `delta[0..delta_len]`, which
 * must have one entry per position.
 */
enum DgpiStatus dgpi_estimate(const struct DgpiDataset *ds,
                              const struct DgpiConfig *cfg,
                              const double *delta,
                              size_t delta_len,
                              uint64_t seed,
                              struct DgpiEstimate **out);

enum DgpiStatus dgpi_estimate_summary(const struct DgpiEstimate *est, struct DgpiSummary *out);

/**
 * Copies up to `len` per-unit contributions into `buf` and returns how
 * many exist. Pass a null buffer to query the count.
 */
size_t dgpi_estimate_contributions(const struct DgpiEstimate *est, double *buf, size_t len);

void dgpi_estimate_free(struct DgpiEstimate *est);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNGPI_H */
