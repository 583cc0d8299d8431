/* disco3d C API. Generated by cbindgen; do not edit by hand. */

#ifndef DISCO3D_H
#define DISCO3D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum DiscoStatus {
  DISCO_STATUS_OK = 0,
  /**
   * A required pointer was null or an argument failed validation.
   */
  DISCO_STATUS_INVALID_ARGUMENT = 1,
  DISCO_STATUS_IO = 2,
  /**
   * Malformed file or payload content.
   */
  DISCO_STATUS_FORMAT = 3,
  /**
   * A non-finite value aborted the computation.
   */
  DISCO_STATUS_NUMERIC = 4,
  /**
   * Unexpected internal failure.
   */
  DISCO_STATUS_INTERNAL = 5,
} DiscoStatus;

/**
 * An immutable feature field (samples, optional rays, class catalog).
 */
typedef struct DiscoFieldSet DiscoFieldSet;

/**
 * A trained run: projector parameters, prototype bank, config, telemetry.
 */
typedef struct DiscoRun DiscoRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *disco_last_error_message(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be a pointer previously returned by a `disco_*` function (or
 * null) and not yet freed.
 */
void disco_string_free(char *s);

/**
 * Generate a synthetic fieldset from a TOML generator spec.
 *
 * # Safety
 * `spec_toml` must be a NUL-terminated string; `out` must be a valid
 * destination pointer.
 */
enum DiscoStatus disco_fieldset_generate(const char *spec_toml, struct DiscoFieldSet **out);

/**
 * Load a fieldset from a field file (the catalog sidecar is picked up
 * automatically when present).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum DiscoStatus disco_fieldset_load(const char *path, struct DiscoFieldSet **out);

/**
 * Write a fieldset (and its catalog sidecar) to disk.
 *
 * # Safety
 * `fieldset` must be a live handle; `path` a NUL-terminated string.
 */
enum DiscoStatus disco_fieldset_save(const struct DiscoFieldSet *fieldset, const char *path);

/**
 * Number of samples in a fieldset (0 for a null handle).
 *
 * # Safety
 * `fieldset` must be null or a live handle.
 */
uint64_t disco_fieldset_sample_count(const struct DiscoFieldSet *fieldset);

/**
 * Release a fieldset handle.
 *
 * # Safety
 * `fieldset` must be null or an unfreed handle from this library.
 */
void disco_fieldset_free(struct DiscoFieldSet *fieldset);

/**
 * Train on a fieldset. `queries_json` (nullable) follows the query-file
 * schema with catalog references resolved against the fieldset's catalog;
 * `config_toml` (nullable) overrides the stock run configuration. As in
 * the CLI, a query-free call treats the whole prototype budget as
 * clustering capacity, while queries size the relevant block themselves.
 *
 * # Safety
 * `fieldset` must be a live handle; strings NUL-terminated or null; `out`
 * valid.
 */
enum DiscoStatus disco_train(const struct DiscoFieldSet *fieldset,
                             const char *queries_json,
                             const char *config_toml,
                             struct DiscoRun **out);

/**
 * Persist a trained run as a checkpoint file.
 *
 * # Safety
 * `run_handle` must be a live handle; `path` a NUL-terminated string.
 */
enum DiscoStatus disco_run_save(const struct DiscoRun *run_handle, const char *path);

/**
 * Load a checkpoint file into a run handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid.
 */
enum DiscoStatus disco_run_load(const char *path, struct DiscoRun **out);

/**
 * Release a run handle.
 *
 * # Safety
 * `run_handle` must be null or an unfreed handle from this library.
 */
void disco_run_free(struct DiscoRun *run_handle);

/**
 * Evaluate a trained run against the fieldset's ground-truth labels and
 * return the metric report as a JSON string (caller frees). Pass a nonzero
 * `use_hungarian` for spatial matching, zero for embedding matching.
 *
 * # Safety
 * Handles must be live; `report_json` must be a valid destination.
 */
enum DiscoStatus disco_evaluate_json(const struct DiscoRun *run_handle,
                                     const struct DiscoFieldSet *fieldset,
                                     int32_t use_hungarian,
                                     char **report_json);

/**
 * Classify every sample with a trained run and write the
 * `x,y,z,label,confidence` CSV.
 *
 * # Safety
 * Handles must be live; `path` a NUL-terminated string.
 */
enum DiscoStatus disco_export_csv(const struct DiscoRun *run_handle,
                                  const struct DiscoFieldSet *fieldset,
                                  const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DISCO3D_H */
