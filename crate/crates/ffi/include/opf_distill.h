#ifndef OPF_DISTILL_H
#define OPF_DISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Status codes. Values 2 to 4 match the command-line exit codes.
 */
typedef enum OdStatus {
  OD_STATUS_OK = 0,
  /*
   A required pointer was null or a buffer was too small.
   */
  OD_STATUS_INVALID_ARGUMENT = 1,
  /*
   Bad configuration or parameter value.
   */
  OD_STATUS_USAGE = 2,
  /*
   Malformed or inconsistent input data.
   */
  OD_STATUS_DATA = 3,
  /*
   A solver or factorization failed.
   */
  OD_STATUS_NUMERIC = 4,
  /*
   Internal panic.
   */
  OD_STATUS_PANIC = 5,
} OdStatus;

typedef struct OdFeeder OdFeeder;

typedef struct OdMap OdMap;

typedef struct OdScenarios OdScenarios;

/*
 Feeder plus normalized scenarios, ready for fitting and evaluation.
 */
typedef struct OdWorkbench OdWorkbench;

typedef struct OdMetrics {
  double data_error;
  double minimizer_error;
  /*
   Voltage samples per model (`N·T` minus failed AC scenarios).
   */
  size_t linear_samples;
  double linear_out_of_band_fraction;
  size_t ac_samples;
  double ac_out_of_band_fraction;
} OdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next failing call on the same thread.
 */
const char *od_last_error(void);

/*
 The built-in 37-bus benchmark feeder.

 # Safety
 `out` must be a valid pointer.
 */
enum OdStatus od_feeder_benchmark(struct OdFeeder **out);

/*
 # Safety
 Paths must be NUL-terminated strings; `out` must be a valid pointer.
 */
enum OdStatus od_feeder_load_csv(const char *buses, const char *lines, struct OdFeeder **out);

/*
 Number of non-substation buses.

 # Safety
 `feeder` must be a live handle and `n` a valid pointer.
 */
enum OdStatus od_feeder_bus_count(const struct OdFeeder *feeder, size_t *n);

/*
 # Safety
 `feeder` must be null or a handle not yet freed.
 */
void od_feeder_free(struct OdFeeder *feeder);

/*
 Seeded synthetic scenarios for the benchmark feeder (`P = 50`).

 # Safety
 `feeder` must be a live handle and `out` a valid pointer.
 */
enum OdStatus od_scenarios_benchmark(const struct OdFeeder *feeder,
                                     uint64_t seed,
                                     size_t t,
                                     struct OdScenarios **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OdStatus od_scenarios_load_csv(const char *path, struct OdScenarios **out);

/*
 # Safety
 `scenarios` must be a live handle and `path` a NUL-terminated string.
 */
enum OdStatus od_scenarios_save_csv(const struct OdScenarios *scenarios, const char *path);

/*
 Feature count `P` and scenario count `T`.

 # Safety
 `scenarios` must be a live handle; `p` and `t` valid pointers.
 */
enum OdStatus od_scenarios_dims(const struct OdScenarios *scenarios, size_t *p, size_t *t);

/*
 # Safety
 `scenarios` must be null or a handle not yet freed.
 */
void od_scenarios_free(struct OdScenarios *scenarios);

/*
 Copies both inputs; the handles stay owned by the caller. `by_bus`
 groups the features of each bus together instead of one group per
 feature.

 # Safety
 `feeder` and `scenarios` must be live handles and `out` a valid pointer.
 */
enum OdStatus od_workbench_new(const struct OdFeeder *feeder,
                               const struct OdScenarios *scenarios,
                               double nu,
                               double rho,
                               bool by_bus,
                               struct OdWorkbench **out);

/*
 # Safety
 `wb` must be null or a handle not yet freed.
 */
void od_workbench_free(struct OdWorkbench *wb);

/*
 Fits `method` (`PCA`, `DEIM`, `GL`, `GL2`, `BGL`, `BGL2`, any case)
 with `k` features.

 # Safety
 `wb` must be a live handle, `method` a NUL-terminated string and `out`
 a valid pointer.
 */
enum OdStatus od_fit_k(const struct OdWorkbench *wb,
                       const char *method,
                       size_t k,
                       uint64_t seed,
                       struct OdMap **out);

/*
 Fits a penalized method at a fixed `lambda`.

 # Safety
 As for [`od_fit_k`].
 */
enum OdStatus od_fit_lambda(const struct OdWorkbench *wb,
                            const char *method,
                            double lambda,
                            uint64_t seed,
                            struct OdMap **out);

/*
 # Safety
 `wb` and `map` must be live handles and `metrics` a valid pointer.
 */
enum OdStatus od_evaluate(const struct OdWorkbench *wb,
                          const struct OdMap *map,
                          struct OdMetrics *metrics);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OdStatus od_map_load(const char *path, struct OdMap **out);

/*
 # Safety
 `map` must be a live handle and `path` a NUL-terminated string.
 */
enum OdStatus od_map_save(const struct OdMap *map, const char *path);

/*
 Feature count `P` and number of kept features or components `K`.

 # Safety
 `map` must be a live handle; `p` and `k` valid pointers.
 */
enum OdStatus od_map_dims(const struct OdMap *map, size_t *p, size_t *k);

/*
 Writes the selected feature indices into `buf` (capacity `cap`) and
 their count into `len`. PCA maps select nothing. When `cap` is too small
 `len` still receives the required size.

 # Safety
 `map` must be a live handle, `buf` valid for `cap` writes and `len` a
 valid pointer.
 */
enum OdStatus od_map_selected(const struct OdMap *map, size_t *buf, size_t cap, size_t *len);

/*
 `out = W θ` for one normalized scenario of length `p`.

 # Safety
 `map` must be a live handle; `theta` and `out` valid for `p` elements.
 */
enum OdStatus od_map_apply(const struct OdMap *map, const double *theta, size_t p, double *out);

/*
 # Safety
 `map` must be null or a handle not yet freed.
 */
void od_map_free(struct OdMap *map);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPF_DISTILL_H */
