#ifndef FEDPRUNE_H
#define FEDPRUNE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_POINTER = 1,
  FP_STATUS_INVALID_UTF8 = 2,
  FP_STATUS_CONFIG = 3,
  FP_STATUS_OUT_OF_RANGE = 4,
  FP_STATUS_IO = 5,
  FP_STATUS_RUNTIME = 6,
  FP_STATUS_PANIC = 7,
} FpStatus;

// Structured pruning pattern, as accepted by [`fp_mask_from_scores`].
typedef enum FpPattern {
  FP_PATTERN_WHOLE_ROW = 0,
  FP_PATTERN_WHOLE_COLUMN = 1,
  FP_PATTERN_HALF_ROW = 2,
  FP_PATTERN_HALF_COLUMN = 3,
} FpPattern;

// Per-layer allocation mode, as accepted by [`fp_allocate_per_layer`].
typedef enum FpAllocation {
  FP_ALLOCATION_UNIFIED = 0,
  FP_ALLOCATION_ADAPTIVE_VERBATIM = 1,
  FP_ALLOCATION_ADAPTIVE_BUDGET = 2,
} FpAllocation;

// Training phase stored in [`FpRecord::phase`].
typedef enum FpPhase {
  FP_PHASE_PRUNING = 0,
  FP_PHASE_REFINING = 1,
  FP_PHASE_FINE_TUNING = 2,
} FpPhase;

// Opaque run configuration.
typedef struct FpConfig FpConfig;

// Opaque result of a finished experiment.
typedef struct FpRun FpRun;

// One row of the metrics table.
typedef struct FpRecord {
  uint32_t round;
  // An [`FpPhase`] value.
  uint32_t phase;
  double sparsity;
  double zero_param_ratio;
  uint64_t bytes_down;
  uint64_t bytes_up;
  double train_loss;
  double eval_accuracy;
  double wall_time_s;
} FpRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string.
const char *fp_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *fp_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must be null or a pointer returned by this library and not yet freed.
void fp_string_free(char *s);

// Parses a TOML config document. Missing keys take their defaults; an
// empty string yields the reference configuration.
//
// # Safety
// `text` must be a valid nul-terminated string and `out` a valid pointer.
enum FpStatus fp_config_parse(const char *text, struct FpConfig **out);

// Sets one config key; `value` is read as TOML, falling back to a plain
// string. The config is left unchanged when the result does not validate.
//
// # Safety
// `cfg` must be a live config handle; `key` and `value` valid strings.
enum FpStatus fp_config_set(struct FpConfig *cfg, const char *key, const char *value);

// Renders the config as TOML. Free the result with [`fp_string_free`].
//
// # Safety
// `cfg` must be null or a live config handle.
char *fp_config_render(const struct FpConfig *cfg);

// # Safety
// `cfg` must be null or a config handle not yet freed.
void fp_config_free(struct FpConfig *cfg);

// Runs a full experiment in memory.
//
// # Safety
// `cfg` must be a live config handle and `out` a valid pointer.
enum FpStatus fp_experiment_run(const struct FpConfig *cfg, struct FpRun **out);

// # Safety
// `run` must be null or a run handle not yet freed.
void fp_run_free(struct FpRun *run);

// Number of metrics rows, including the initial evaluation; 0 for null.
//
// # Safety
// `run` must be null or a live run handle.
size_t fp_run_num_records(const struct FpRun *run);

// Copies metrics row `index` into `out`.
//
// # Safety
// `run` must be a live run handle and `out` a valid pointer.
enum FpStatus fp_run_record(const struct FpRun *run, size_t index, struct FpRecord *out);

// The metrics table as CSV text. Free the result with [`fp_string_free`].
//
// # Safety
// `run` must be null or a live run handle.
char *fp_run_metrics_csv(const struct FpRun *run);

// Writes the metrics CSV to `path`.
//
// # Safety
// `run` must be a live run handle and `path` a valid string.
enum FpStatus fp_run_write_csv(const struct FpRun *run, const char *path);

// Writes the final model checkpoint to `path`.
//
// # Safety
// `run` must be a live run handle and `path` a valid string.
enum FpStatus fp_run_write_checkpoint(const struct FpRun *run, const char *path);

// Slices pruned out of `n_slices` at `sparsity`.
size_t fp_quantize_slice_count(double sparsity, size_t n_slices);

// Keep flags for one `rows x cols` matrix from its slice scores. `scores`
// and `keep_out` both hold `n_slices` entries; `keep_out` receives 1 for
// kept and 0 for pruned slices.
//
// # Safety
// `scores` must point to `n_slices` doubles and `keep_out` to `n_slices` bytes.
enum FpStatus fp_mask_from_scores(uint32_t pattern,
                                  size_t rows,
                                  size_t cols,
                                  const double *scores,
                                  size_t n_slices,
                                  double sparsity,
                                  uint8_t *keep_out);

// Per-layer densities for a global `target` sparsity. `magnitudes`,
// `param_counts` and `densities_out` each hold `n_layers` entries.
//
// # Safety
// The three arrays must be valid for `n_layers` elements.
enum FpStatus fp_allocate_per_layer(double target,
                                    const double *magnitudes,
                                    const size_t *param_counts,
                                    size_t n_layers,
                                    uint32_t mode,
                                    double d_min,
                                    double *densities_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDPRUNE_H */
