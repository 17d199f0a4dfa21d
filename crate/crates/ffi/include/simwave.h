#ifndef SIMWAVE_H
#define SIMWAVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SimwaveStatus {
  SIMWAVE_STATUS_OK = 0,
  SIMWAVE_STATUS_NULL_POINTER = 1,
  /**
   * Invalid configuration or argument.
   */
  SIMWAVE_STATUS_CONFIG = 2,
  /**
   * The model or optimiser failed numerically.
   */
  SIMWAVE_STATUS_NUMERICAL = 3,
  /**
   * The output buffer is shorter than required.
   */
  SIMWAVE_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  SIMWAVE_STATUS_PANIC = 5,
} SimwaveStatus;

/**
 * Outcome of one optimisation.
 */
typedef struct SimwaveResult SimwaveResult;

/**
 * Parsed configuration (scenario, optimiser and goodput settings).
 */
typedef struct SimwaveScenario SimwaveScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t simwave_last_error_message(char *buf, size_t len);

/**
 * Parse a TOML configuration into a new scenario handle.
 *
 * # Safety
 * `toml` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SimwaveStatus simwave_scenario_from_toml(const char *toml, struct SimwaveScenario **out);

/**
 * # Safety
 * `scenario` must be null or a handle from [`simwave_scenario_from_toml`]
 * that has not been freed.
 */
void simwave_scenario_free(struct SimwaveScenario *scenario);

/**
 * Draw users with `seed` and run the alternating optimisation.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
enum SimwaveStatus simwave_optimize(const struct SimwaveScenario *scenario,
                                    uint64_t seed,
                                    struct SimwaveResult **out);

/**
 * # Safety
 * `result` must be null or a handle from [`simwave_optimize`] that has not
 * been freed.
 */
void simwave_result_free(struct SimwaveResult *result);

/**
 * Spectral efficiency (bit/s/Hz) on the evaluation grid.
 *
 * # Safety
 * `result` must be a live handle.
 */
double simwave_result_spectral_efficiency(const struct SimwaveResult *result);

/**
 * # Safety
 * `result` must be a live handle.
 */
double simwave_result_goodput(const struct SimwaveResult *result);

/**
 * # Safety
 * `result` must be a live handle.
 */
size_t simwave_result_outer_iterations(const struct SimwaveResult *result);

/**
 * Copy the optimised phases (layer-major) into `buf`. `len` holds the buffer
 * length on entry and the number of phases on return.
 *
 * # Safety
 * `result` must be a live handle, `len` valid, and `buf` null or `*len`
 * writable doubles.
 */
enum SimwaveStatus simwave_result_phases(const struct SimwaveResult *result,
                                         double *buf,
                                         size_t *len);

/**
 * Self-impedance of a TM1 antenna at `frequency` Hz.
 *
 * # Safety
 * `re` and `im` must be valid pointers.
 */
enum SimwaveStatus simwave_self_impedance(double frequency,
                                          double radius,
                                          double radiation_resistance,
                                          double *re,
                                          double *im);

/**
 * Water-filling of `total` over `n` gains into `powers`.
 *
 * # Safety
 * `gains` and `powers` must point to `n` doubles; `water_level` may be null.
 */
enum SimwaveStatus simwave_water_fill(const double *gains,
                                      size_t n,
                                      double total,
                                      double *powers,
                                      double *water_level);

/**
 * Rate after control overhead for `updated` signalled elements.
 */
double simwave_goodput(double rate,
                       size_t updated,
                       uint32_t bits_per_element,
                       double control_spectral_efficiency,
                       uint32_t symbols_per_slot);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SIMWAVE_H */
