#ifndef BLOCKFED_H
#define BLOCKFED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BfStatus {
  BF_STATUS_OK = 0,
  BF_STATUS_NULL_ARGUMENT = 1,
  BF_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed or out-of-range configuration.
   */
  BF_STATUS_CONFIG = 3,
  /**
   * Unreadable or inconsistent dataset.
   */
  BF_STATUS_DATASET = 4,
  /**
   * Local training produced a non-finite loss.
   */
  BF_STATUS_DIVERGED = 5,
  /**
   * No client could afford the current stage.
   */
  BF_STATUS_NO_ELIGIBLE_CLIENTS = 6,
  /**
   * Every configured round has already run.
   */
  BF_STATUS_FINISHED = 7,
  /**
   * Shape or value errors in numeric helpers.
   */
  BF_STATUS_INVALID_INPUT = 8,
  /**
   * Any other library error.
   */
  BF_STATUS_INTERNAL = 9,
  /**
   * A panic was caught at the boundary; the handle should be discarded.
   */
  BF_STATUS_PANIC = 10,
} BfStatus;

/**
 * Kernel choice for [`bf_nhsic`], passed as its integer value.
 */
typedef enum BfKernel {
  BF_KERNEL_LINEAR = 0,
  /**
   * Gaussian with the median pairwise distance as bandwidth.
   */
  BF_KERNEL_GAUSSIAN_MEDIAN = 1,
} BfKernel;

/**
 * Opaque experiment configuration.
 */
typedef struct BfConfig BfConfig;

/**
 * Opaque running simulation.
 */
typedef struct BfSimulation BfSimulation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *bf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bf_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void bf_string_free(char *s);

/**
 * The built-in desk-scale configuration.
 */
struct BfConfig *bf_config_default(void);

/**
 * Parses and validates a JSON configuration into `*out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum BfStatus bf_config_from_json(const char *json, struct BfConfig **out);

/**
 * Serializes `cfg` as pretty JSON into `*out`.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_config_to_json(const struct BfConfig *cfg, char **out);

/**
 * Overrides the experiment seed.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum BfStatus bf_config_set_seed(struct BfConfig *cfg, uint64_t seed);

/**
 * Releases a configuration. Null is ignored.
 *
 * # Safety
 * `cfg` must come from this library and not have been freed already.
 */
void bf_config_free(struct BfConfig *cfg);

/**
 * Builds data, clients and the initial model. `threads == 0` picks the
 * core count. The simulation keeps its own copy of the configuration.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_simulation_new(const struct BfConfig *cfg,
                                size_t threads,
                                struct BfSimulation **out);

/**
 * Rounds completed so far.
 *
 * # Safety
 * `sim` must be a live handle or null (which yields 0).
 */
size_t bf_simulation_round(const struct BfSimulation *sim);

/**
 * Configured number of rounds.
 *
 * # Safety
 * `sim` must be a live handle or null (which yields 0).
 */
size_t bf_simulation_rounds(const struct BfSimulation *sim);

/**
 * Runs one round; `*out` receives its metrics as a JSON object.
 * Returns `BF_STATUS_FINISHED` once every round has run.
 *
 * # Safety
 * `sim` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_simulation_step(struct BfSimulation *sim, char **out);

/**
 * Runs the remaining rounds; `*out` receives a JSON array of their metrics.
 *
 * # Safety
 * `sim` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_simulation_run(struct BfSimulation *sim, char **out);

/**
 * Drains the warnings recorded so far as a JSON array.
 *
 * # Safety
 * `sim` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_simulation_take_warnings(struct BfSimulation *sim, char **out);

/**
 * Analytic per-stage memory of the simulation's partition as JSON: the full
 * reference plus one entry per stage.
 *
 * # Safety
 * `sim` must be a live handle; `out` must be writable.
 */
enum BfStatus bf_simulation_mem_report(const struct BfSimulation *sim, char **out);

/**
 * Releases a simulation. Null is ignored.
 *
 * # Safety
 * `sim` must come from this library and not have been freed already.
 */
void bf_simulation_free(struct BfSimulation *sim);

/**
 * Normalized HSIC between the rows of `x` (`m × dx`) and `y` (`m × dy`),
 * both row-major. `kernel_x` and `kernel_y` take [`BfKernel`] values.
 *
 * # Safety
 * `x` must point to `m·dx` doubles, `y` to `m·dy` doubles, `out` must be writable.
 */
enum BfStatus bf_nhsic(const double *x,
                       const double *y,
                       size_t m,
                       size_t dx,
                       size_t dy,
                       uint32_t kernel_x,
                       uint32_t kernel_y,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOCKFED_H */
