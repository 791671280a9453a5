#ifndef PQLASSO_H
#define PQLASSO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PqStatus {
  PQ_STATUS_OK = 0,
  PQ_STATUS_NULL_POINTER = 1,
  PQ_STATUS_INVALID_ARGUMENT = 2,
  PQ_STATUS_IO = 3,
  PQ_STATUS_PARSE = 4,
  PQ_STATUS_SCHEMA = 5,
  PQ_STATUS_NUMERICAL = 6,
  PQ_STATUS_BUFFER_TOO_SMALL = 7,
  PQ_STATUS_PANIC = 8,
} PqStatus;

typedef struct PqDataset PqDataset;

typedef struct PqKernels PqKernels;

typedef struct PqNullFit PqNullFit;

typedef struct PqPath PqPath;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pq_last_error(void);

/**
 * Library version, static storage.
 */
const char *pq_version(void);

/**
 * Simulates a dataset into `out_dir`. `config_toml` holds simulation
 * settings as TOML text and may be null for defaults.
 *
 * # Safety
 * String arguments must be null or nul-terminated.
 */
enum PqStatus pq_simulate(const char *config_toml, const char *out_dir);

/**
 * Loads a phenotype table, optionally joined with a genotype triplet.
 * `schema_path` (TOML) and `bfile` may be null.
 *
 * # Safety
 * String arguments must be null or nul-terminated; `out` must be writable.
 */
enum PqStatus pq_dataset_load(const char *pheno_path,
                              const char *schema_path,
                              const char *bfile,
                              struct PqDataset **out);

/**
 * # Safety
 * `data` must be null or a live handle from this library.
 */
void pq_dataset_free(struct PqDataset *data);

/**
 * # Safety
 * `data` must be a live handle; output pointers may be null.
 */
enum PqStatus pq_dataset_dims(const struct PqDataset *data,
                              size_t *n_obs,
                              size_t *n_subjects,
                              size_t *n_variants);

/**
 * Observed outcomes, in dataset row order.
 *
 * # Safety
 * `out` must hold `len` doubles or be null with `len == 0`.
 */
enum PqStatus pq_dataset_outcome(const struct PqDataset *data,
                                 double *out,
                                 size_t len,
                                 size_t *needed);

/**
 * Reads `n_grm` relatedness files aligned to the dataset subjects.
 *
 * # Safety
 * `grm_paths` must point to `n_grm` nul-terminated strings.
 */
enum PqStatus pq_kernels_load(const char *const *grm_paths,
                              size_t n_grm,
                              const struct PqDataset *data,
                              struct PqKernels **out);

/**
 * # Safety
 * `k` must be null or a live handle from this library.
 */
void pq_kernels_free(struct PqKernels *k);

/**
 * Null-model fit (no variant effects) with default settings.
 * `family` is "gaussian" or "binomial".
 *
 * # Safety
 * Handles must be live; `family` nul-terminated; `out` writable.
 */
enum PqStatus pq_fit_null(const struct PqDataset *data,
                          const struct PqKernels *kernels,
                          const char *family,
                          struct PqNullFit **out);

/**
 * # Safety
 * `path` nul-terminated; `out` writable.
 */
enum PqStatus pq_null_fit_read(const char *path, struct PqNullFit **out);

/**
 * # Safety
 * `fit` live; `path` nul-terminated.
 */
enum PqStatus pq_null_fit_write(const struct PqNullFit *fit, const char *path);

/**
 * Variance parameters in the order phi (Gaussian only), tau_k, then the
 * upper triangle of `D` row by row.
 *
 * # Safety
 * `out` must hold `len` doubles; `needed` may be null.
 */
enum PqStatus pq_null_fit_params(const struct PqNullFit *fit,
                                 double *out,
                                 size_t len,
                                 size_t *needed);

/**
 * # Safety
 * `fit` must be null or a live handle from this library.
 */
void pq_null_fit_free(struct PqNullFit *fit);

/**
 * Penalized mixed-model lasso path with components frozen at `null_fit`.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum PqStatus pq_fit_path(const struct PqDataset *data,
                          const struct PqNullFit *null_fit,
                          const struct PqKernels *kernels,
                          size_t n_lambda,
                          double ratio,
                          struct PqPath **out);

/**
 * Lasso path without random effects.
 *
 * # Safety
 * `data` live; `family` nul-terminated; `out` writable.
 */
enum PqStatus pq_fit_plain_lasso(const struct PqDataset *data,
                                 const char *family,
                                 size_t n_lambda,
                                 double ratio,
                                 struct PqPath **out);

/**
 * # Safety
 * `path` must be a live handle; `len` writable.
 */
enum PqStatus pq_path_len(const struct PqPath *path, size_t *len);

/**
 * Lambda and number of selected variants at entry `index`.
 *
 * # Safety
 * `path` live; output pointers may be null.
 */
enum PqStatus pq_path_entry(const struct PqPath *path, size_t index, double *lambda, size_t *df);

/**
 * Variant effects per allele copy at entry `index`.
 *
 * # Safety
 * `out` must hold `len` doubles; `needed` may be null.
 */
enum PqStatus pq_path_beta(const struct PqPath *path,
                           size_t index,
                           double *out,
                           size_t len,
                           size_t *needed);

/**
 * Writes `path.tsv`, `coefficients.tsv` and `path.json` into `dir`.
 *
 * # Safety
 * `path` live; `dir` nul-terminated.
 */
enum PqStatus pq_path_write(const struct PqPath *path, const char *dir);

/**
 * # Safety
 * `path` must be null or a live handle from this library.
 */
void pq_path_free(struct PqPath *path);

/**
 * Response-scale predictions for every row of `data` from entry `index`.
 *
 * # Safety
 * Handles live; `out` must hold `len` doubles; `needed` may be null.
 */
enum PqStatus pq_predict(const struct PqPath *path,
                         size_t index,
                         const struct PqDataset *data,
                         double *out,
                         size_t len,
                         size_t *needed);

/**
 * `1 - MSPE / variance about the mean` of `y`.
 *
 * # Safety
 * `y` and `yhat` must hold `n` doubles; `out` writable.
 */
enum PqStatus pq_r2_mspe(const double *y, const double *yhat, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PQLASSO_H */
