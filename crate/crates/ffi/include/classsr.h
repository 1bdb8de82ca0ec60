#ifndef CLASSSR_H
#define CLASSSR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum ClasssrStatus {
  CLASSSR_STATUS_OK = 0,
  CLASSSR_STATUS_NULL_POINTER = 1,
  CLASSSR_STATUS_INVALID_ARGUMENT = 2,
  CLASSSR_STATUS_CONFIG = 3,
  CLASSSR_STATUS_DATASET = 4,
  CLASSSR_STATUS_PARSE = 5,
  CLASSSR_STATUS_IO = 6,
  CLASSSR_STATUS_RUNTIME = 7,
  CLASSSR_STATUS_PANIC = 8,
} ClasssrStatus;

/**
 * A set of realizations sharing variable layout and units.
 */
typedef struct ClasssrDataset ClasssrDataset;

/**
 * An expression over the constants and variables of one library.
 */
typedef struct ClasssrExpression ClasssrExpression;

/**
 * Token vocabulary built from a library JSON description.
 */
typedef struct ClasssrLibrary ClasssrLibrary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next failure.
 */
const char *classsr_last_error(void);

/**
 * Static version string.
 */
const char *classsr_version(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void classsr_string_free(char *s);

/**
 * Build a library from its JSON description.
 *
 * # Safety
 * `json` must be a nul-terminated string and `out` a valid pointer.
 */
enum ClasssrStatus classsr_library_from_json(const char *json, struct ClasssrLibrary **out);

/**
 * # Safety
 * `lib` must be null or a handle from [`classsr_library_from_json`] not yet freed.
 */
void classsr_library_free(struct ClasssrLibrary *lib);

/**
 * Number of tokens in the vocabulary, or 0 for null.
 *
 * # Safety
 * `lib` must be null or a live library handle.
 */
size_t classsr_library_size(const struct ClasssrLibrary *lib);

/**
 * Load a dataset from a manifest file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum ClasssrStatus classsr_dataset_from_manifest(const char *path, struct ClasssrDataset **out);

/**
 * Build a unitless dataset from flat arrays.
 *
 * Realization `i` has `n_samples[i]` rows. `x` holds every row in order,
 * each row `n_vars` values; `y` holds the matching targets.
 *
 * # Safety
 * `n_samples` must point to `n_reals` counts, `x` to `n_vars * sum(n_samples)`
 * values and `y` to `sum(n_samples)` values; `out` must be valid.
 */
enum ClasssrStatus classsr_dataset_new(size_t n_reals,
                                       const size_t *n_samples,
                                       size_t n_vars,
                                       const double *x,
                                       const double *y,
                                       struct ClasssrDataset **out);

/**
 * # Safety
 * `data` must be null or a live dataset handle.
 */
void classsr_dataset_free(struct ClasssrDataset *data);

/**
 * # Safety
 * `data` must be null or a live dataset handle.
 */
size_t classsr_dataset_n_realizations(const struct ClasssrDataset *data);

/**
 * Parse an infix expression against `lib`.
 *
 * # Safety
 * `lib` must be a live library handle, `infix` nul-terminated, `out` valid.
 */
enum ClasssrStatus classsr_expression_parse(const struct ClasssrLibrary *lib,
                                            const char *infix,
                                            struct ClasssrExpression **out);

/**
 * # Safety
 * `expr` must be null or a live expression handle.
 */
void classsr_expression_free(struct ClasssrExpression *expr);

/**
 * Node count, or 0 for null.
 *
 * # Safety
 * `expr` must be null or a live expression handle.
 */
size_t classsr_expression_complexity(const struct ClasssrExpression *expr);

/**
 * Canonical infix form.
 *
 * # Safety
 * `expr` must be a live expression handle and `out` valid.
 */
enum ClasssrStatus classsr_expression_to_infix(const struct ClasssrExpression *expr, char **out);

/**
 * Evaluate on `n_samples` rows of `x` (row-major, one column per library
 * variable) with the given constants. `*invalid` is set to 1 when the
 * protected evaluation flagged a domain violation.
 *
 * # Safety
 * Arrays must hold the stated number of values; `out` must hold `n_samples`.
 */
enum ClasssrStatus classsr_expression_evaluate(const struct ClasssrExpression *expr,
                                               size_t n_samples,
                                               size_t n_vars,
                                               const double *x,
                                               const double *class_vals,
                                               size_t n_class,
                                               const double *spe_vals,
                                               size_t n_spe,
                                               double *out,
                                               int32_t *invalid);

/**
 * Fit the constants of `expr` to `data`; the fit result is written as JSON.
 * `fit_config_json` may be null for defaults.
 *
 * # Safety
 * Handles must be live; `out_json` valid.
 */
enum ClasssrStatus classsr_fit_constants(const struct ClasssrExpression *expr,
                                         const struct ClasssrDataset *data,
                                         const char *fit_config_json,
                                         uint64_t seed,
                                         char **out_json);

/**
 * Run a full search; the Pareto front is written as JSON.
 *
 * # Safety
 * `data` must be live, `run_config_json` nul-terminated, `out_json` valid.
 */
enum ClasssrStatus classsr_search(const struct ClasssrDataset *data,
                                  const char *run_config_json,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLASSSR_H */
