#ifndef HEISHOM_H
#define HEISHOM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HeishomStatus {
  HEISHOM_STATUS_OK = 0,
  HEISHOM_STATUS_NULL_POINTER = 1,
  HEISHOM_STATUS_INVALID_ARGUMENT = 2,
  HEISHOM_STATUS_INVALID_PARAMS = 3,
  HEISHOM_STATUS_UNKNOWN_MODEL = 4,
  HEISHOM_STATUS_NO_CONVERGENCE = 5,
  HEISHOM_STATUS_NUMERICAL_BLOWUP = 6,
  HEISHOM_STATUS_INVALID_TIMESTEP = 7,
  HEISHOM_STATUS_CONFIG = 8,
  HEISHOM_STATUS_IO = 9,
  HEISHOM_STATUS_PANIC = 10,
} HeishomStatus;

/*
 Values on a cubic lattice, first coordinate fastest.
 */
typedef struct HeishomGridFunction HeishomGridFunction;

/*
 A registered control model.
 */
typedef struct HeishomModel HeishomModel;

/*
 Model parameters (rates, discount, horizon, ladders, seed).
 */
typedef struct HeishomParams HeishomParams;

/*
 Mean, standard error and effective sample size of a Monte Carlo estimate.
 */
typedef struct HeishomEstimate {
  double mean;
  double std_error;
  double effective_samples;
} HeishomEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer
 stays valid until the next call into the library on the same thread.
 */
const char *heishom_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *heishom_version(void);

/*
 Default parameters: k = (5, 5, 1), a = 1, T = 1, one slow dimension.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
enum HeishomStatus heishom_params_new(struct HeishomParams **out);

/*
 Parameters from a JSON object with the fields of the config's `params`
 section; absent fields take their defaults. The result is not validated.

 # Safety
 `json` must be a NUL-terminated string and `out` writable.
 */
enum HeishomStatus heishom_params_from_json(const char *json, struct HeishomParams **out);

/*
 # Safety
 `params` must be a live handle.
 */
enum HeishomStatus heishom_params_set_rates(struct HeishomParams *params,
                                            double k1,
                                            double k2,
                                            double k3);

/*
 `Ok` when every invariant holds, `InvalidParams` otherwise with the
 violations joined by "; " as the last error.

 # Safety
 `params` must be a live handle.
 */
enum HeishomStatus heishom_params_validate(const struct HeishomParams *params);

/*
 # Safety
 `params` must be null or a handle not yet freed.
 */
void heishom_params_free(struct HeishomParams *params);

/*
 # Safety
 `id` must be a NUL-terminated string and `out` writable.
 */
enum HeishomStatus heishom_model_new(const char *id, struct HeishomModel **out);

/*
 Number of controls of the model.

 # Safety
 `model` must be a live handle and `out` writable.
 */
enum HeishomStatus heishom_model_n_controls(const struct HeishomModel *model, size_t *out);

/*
 Terminal datum `g(x, y)` for a slow point of length `n_slow`.

 # Safety
 `x` must point to `n_slow` doubles, `y` to three, `out` writable.
 */
enum HeishomStatus heishom_model_terminal(const struct HeishomModel *model,
                                          const double *x,
                                          size_t n_slow,
                                          const double *y,
                                          double *out);

/*
 # Safety
 `model` must be null or a handle not yet freed.
 */
void heishom_model_free(struct HeishomModel *model);

/*
 Closed form of `-L chi` for `chi = |y|^2` at `y` (three doubles).

 # Safety
 `params` must be a live handle, `y` must point to three doubles and
 `out` must be writable.
 */
enum HeishomStatus heishom_neg_generator_chi(const struct HeishomParams *params,
                                             const double *y,
                                             double *out);

/*
 `beta` with `-L U1 >= gamma U1 - beta`.

 # Safety
 `params` must be a live handle and `out` writable.
 */
enum HeishomStatus heishom_lyapunov_u1_certificate(const struct HeishomParams *params,
                                                   double gamma,
                                                   double *out);

/*
 Batch-means estimate of `E_mu[cos y3]` from `n_chains` chains of
 `total_steps` steps (the first `burn_in_steps` discarded).

 # Safety
 `params` must be a live handle and `out` writable.
 */
enum HeishomStatus heishom_estimate_cos_y3(const struct HeishomParams *params,
                                           double dt,
                                           uint64_t total_steps,
                                           uint64_t burn_in_steps,
                                           size_t n_chains,
                                           uint64_t seed,
                                           struct HeishomEstimate *out);

/*
 Nodes per axis of the lattice with radius `radius` and spacing `h`.

 # Safety
 `out` must be writable.
 */
enum HeishomStatus heishom_grid_nodes_per_axis(double radius, double h, size_t *out);

/*
 Solves `delta u - L_h u = F` with the default scheme and solver. `f`
 holds `n^3` node values, first coordinate fastest, where `n` is given
 by [`heishom_grid_nodes_per_axis`].

 # Safety
 `params` must be a live handle, `f` must point to `len` doubles and
 `out` must be writable.
 */
enum HeishomStatus heishom_cell_solve(const struct HeishomParams *params,
                                      double radius,
                                      double h,
                                      double delta,
                                      const double *f,
                                      size_t len,
                                      struct HeishomGridFunction **out);

/*
 Number of values of a grid function.

 # Safety
 `gf` must be a live handle.
 */
size_t heishom_grid_function_len(const struct HeishomGridFunction *gf);

/*
 Value at the origin node.

 # Safety
 `gf` must be a live handle and `out` writable.
 */
enum HeishomStatus heishom_grid_function_at_origin(const struct HeishomGridFunction *gf,
                                                   double *out);

/*
 Copies all values into `buf`, which must hold `len` doubles with `len`
 equal to [`heishom_grid_function_len`].

 # Safety
 `gf` must be a live handle and `buf` must point to `len` writable doubles.
 */
enum HeishomStatus heishom_grid_function_copy(const struct HeishomGridFunction *gf,
                                              double *buf,
                                              size_t len);

/*
 # Safety
 `gf` must be null or a handle not yet freed.
 */
void heishom_grid_function_free(struct HeishomGridFunction *gf);

/*
 Runs an experiment config (the JSON accepted by the `heishom` binary)
 into `out_dir`. `all_pass` receives 1 when every check passed, else 0.

 # Safety
 `config_json` and `out_dir` must be NUL-terminated strings and
 `all_pass` writable.
 */
enum HeishomStatus heishom_run_config(const char *config_json,
                                      const char *out_dir,
                                      int32_t *all_pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEISHOM_H */
