#ifndef ODEFIT_H
#define ODEFIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum OdefitStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  SolverFailure = 3,
  TrainingFailure = 4,
  InternalPanic = 5,
} OdefitStatus;

/**
 * Opaque model handle (currently always a Cucker-Smale instance).
 */
typedef struct OdefitModel OdefitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message for the calling thread into `buf`
 * (NUL-terminated, truncated to `len`). Returns the full message length in
 * bytes, excluding the terminator; call with `buf = NULL` to query the size.
 */
uintptr_t odefit_last_error(char *buf, uintptr_t len);

/**
 * Creates a planar Cucker-Smale model with `num_particles` particles
 * (state dimension `4 * num_particles`, 5 parameters). Returns NULL for
 * zero particles.
 */
struct OdefitModel *odefit_cucker_smale_new(uintptr_t num_particles);

/**
 * Releases a model handle. NULL is a no-op.
 */
void odefit_model_free(struct OdefitModel *model);

uintptr_t odefit_model_state_dim(const struct OdefitModel *model);

uintptr_t odefit_model_param_dim(const struct OdefitModel *model);

/**
 * Integrates the model from `x0` over `num_intervals` uniform steps of
 * size `h` starting at `t0` and writes the `(num_intervals + 1) *
 * state_dim` sampled states to `out_states` (row-major, one state per grid
 * node).
 *
 * # Safety
 * `theta` must point to `param_dim` doubles, `x0` to `state_dim` doubles,
 * and `out_states` to `(num_intervals + 1) * state_dim` writable doubles.
 */
enum OdefitStatus odefit_solve(const struct OdefitModel *model,
                               const double *theta,
                               const double *x0,
                               double t0,
                               double h,
                               uintptr_t num_intervals,
                               double rtol,
                               double atol,
                               double *out_states);

/**
 * Trains parameters against a target trajectory.
 *
 * `algorithm`: 0 = sensitivity-based gradient descent, 1 = alternating
 * collocation descent, 2 = alternating descent with state reset,
 * 3 = augmented Lagrangian. `targets` holds `(num_intervals + 1) *
 * state_dim` doubles (one state per grid node). The final parameters are
 * written to `theta_inout`, which supplies the initial guess on entry; the
 * final training SSE is written to `out_final_sse` when non-NULL.
 *
 * # Safety
 * Pointer/length contracts as documented per argument; `theta_inout` must
 * hold `param_dim` writable doubles.
 */
enum OdefitStatus odefit_train(const struct OdefitModel *model,
                               uint32_t algorithm,
                               const double *targets,
                               const double *x0,
                               double t0,
                               double h,
                               uintptr_t num_intervals,
                               uintptr_t epochs,
                               uint64_t seed,
                               double *theta_inout,
                               double *out_final_sse);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ODEFIT_H */
