#ifndef GRADSYNC_H
#define GRADSYNC_H

/* Generated by cbindgen. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum GsBranch {
  GS_BRANCH_EMPTY = 0,
  GS_BRANCH_PASS_THROUGH = 1,
  GS_BRANCH_REDUCED = 2,
  GS_BRANCH_GATHERED = 3,
  GS_BRANCH_CONVERTED_AND_REDUCED = 4,
} GsBranch;

typedef enum GsMode {
  GS_MODE_COMPARE = 0,
  GS_MODE_WEAK = 1,
  GS_MODE_STRONG = 2,
} GsMode;

typedef enum GsRule {
  GS_RULE_LEGACY = 0,
  GS_RULE_PROPOSED = 1,
} GsRule;

typedef enum GsStatus {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_POINTER = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_TENSOR = 3,
  GS_STATUS_CONFIG = 4,
  GS_STATUS_COLLECTIVE_ABORT = 5,
  GS_STATUS_IO = 6,
  GS_STATUS_PANIC = 7,
} GsStatus;

// An experiment configuration.
typedef struct GsConfig GsConfig;

// A dense or row-slice gradient.
typedef struct GsGrad GsGrad;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on this thread.
const char *gs_last_error(void);

// Library version as a static NUL-terminated string.
const char *gs_version(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void gs_string_free(char *s);

// Creates a dense gradient of `shape` with row-major `values`.
//
// # Safety
// Pointers must reference at least the given number of elements.
enum GsStatus gs_grad_dense_new(const size_t *shape,
                                size_t ndim,
                                const double *values,
                                size_t len,
                                size_t dtype_width,
                                struct GsGrad **out);

// Creates a row-slice gradient: `nrows` rows of `dense_shape`, row `i`
// at `indices[i]`, `values` holding the rows back to back.
//
// # Safety
// Pointers must reference at least the given number of elements.
enum GsStatus gs_grad_slices_new(const size_t *dense_shape,
                                 size_t ndim,
                                 const size_t *indices,
                                 size_t nrows,
                                 const double *values,
                                 size_t len,
                                 size_t dtype_width,
                                 struct GsGrad **out);

// Releases a gradient. Null is ignored.
//
// # Safety
// `g` must come from this library and not be freed twice.
void gs_grad_free(struct GsGrad *g);

// Whether the gradient is dense.
//
// # Safety
// `g` must be a live handle and `out` writable.
enum GsStatus gs_grad_is_dense(const struct GsGrad *g, bool *out);

// Element count of the gradient's dense form.
//
// # Safety
// `g` must be a live handle and `out` writable.
enum GsStatus gs_grad_dense_len(const struct GsGrad *g, size_t *out);

// Nominal payload bytes: dense elements, or stored slice rows, times the
// element width.
//
// # Safety
// `g` must be a live handle and `out` writable.
enum GsStatus gs_grad_nominal_bytes(const struct GsGrad *g, uint64_t *out);

// Writes the dense form into `out`, which must hold exactly the dense
// element count (see [`gs_grad_dense_len`]).
//
// # Safety
// `g` must be a live handle and `out` must hold `len` doubles.
enum GsStatus gs_grad_materialize(const struct GsGrad *g, double *out, size_t len);

// Accumulates `n` contributions to one variable. `*out` receives a new
// handle, or null for an empty input list; `*branch` the branch taken.
//
// # Safety
// `inputs` must hold `n` live handles; `out` and `branch` must be writable.
enum GsStatus gs_accumulate(enum GsRule rule,
                            const struct GsGrad *const *inputs,
                            size_t n,
                            struct GsGrad **out,
                            enum GsBranch *branch);

// Allgather receive-buffer bytes for per-rank row counts `rows[0..world]`.
//
// # Safety
// `rows` must hold `world` values and `out` be writable.
enum GsStatus gs_predict_gather_bytes(size_t world,
                                      const uint64_t *rows,
                                      uint64_t row_width,
                                      uint64_t dtype_width,
                                      uint64_t *out);

// Allreduce payload bytes of a dense tensor of `shape`.
//
// # Safety
// `shape` must hold `ndim` values and `out` be writable.
enum GsStatus gs_predict_reduce_bytes(const size_t *shape,
                                      size_t ndim,
                                      uint64_t dtype_width,
                                      uint64_t *out);

// Speedup and efficiency of each `(worlds[i], throughputs[i])` against
// `base`. World sizes must be distinct.
//
// # Safety
// Input arrays must hold `n` values; output arrays room for `n`.
enum GsStatus gs_compute_efficiency(const size_t *worlds,
                                    const double *throughputs,
                                    size_t n,
                                    size_t base,
                                    double *speedup_out,
                                    double *efficiency_out);

// Parses flat `key = value` config text for `mode`.
//
// # Safety
// `source` must be NUL-terminated and `out` writable.
enum GsStatus gs_config_parse(enum GsMode mode, const char *source, struct GsConfig **out);

// Overrides one setting.
//
// # Safety
// `cfg` must be a live handle; strings NUL-terminated.
enum GsStatus gs_config_set(struct GsConfig *cfg, const char *key, const char *value);

// Releases a config. Null is ignored.
//
// # Safety
// `cfg` must come from this library and not be freed twice.
void gs_config_free(struct GsConfig *cfg);

// Runs the experiment and returns its report (JSON, or CSV when the
// config says so) in `*report_out`. Trace and report files are written
// when the config names output paths.
//
// # Safety
// `cfg` must be a live handle and `report_out` writable.
enum GsStatus gs_run_experiment(const struct GsConfig *cfg, char **report_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADSYNC_H */
