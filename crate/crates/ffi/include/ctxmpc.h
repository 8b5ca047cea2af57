#ifndef CTXMPC_H
#define CTXMPC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Matrix selector for `ctxmpc_model_matrix`.
 */
enum CtxmpcMatrix
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  CtxmpcMatrix_RiccatiP = 0,
  CtxmpcMatrix_GainK = 1,
  CtxmpcMatrix_ClosedLoopF = 2,
  CtxmpcMatrix_ExcessMetricH = 3,
};
#ifndef __cplusplus
typedef int32_t CtxmpcMatrix;
#endif // __cplusplus

/**
 * Status codes returned by every fallible call.
 */
enum CtxmpcStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  CtxmpcStatus_Ok = 0,
  CtxmpcStatus_NullPointer = 1,
  CtxmpcStatus_InvalidArgument = 2,
  CtxmpcStatus_NumericFailure = 3,
  CtxmpcStatus_IoError = 4,
  CtxmpcStatus_ConfigError = 5,
  CtxmpcStatus_ReplayMismatch = 6,
  CtxmpcStatus_Panic = 7,
};
#ifndef __cplusplus
typedef int32_t CtxmpcStatus;
#endif // __cplusplus

/**
 * Opaque model handle.
 */
typedef struct CtxmpcModel CtxmpcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ctxmpc_version(void);

/**
 * Copy the last error message for the calling thread into `buf`
 * (NUL-terminated, truncated to `cap`). Returns the full message
 * length in bytes, not counting the terminator.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes (or be NULL with `cap` 0
 * to query the length).
 */
uintptr_t ctxmpc_last_error(char *buf, uintptr_t cap);

/**
 * Build a model from row-major `A (n×n)`, `B (n×m)`, `Q (n×n)`,
 * `R (m×m)` and the disturbance norm bound. On success `*out` owns a
 * new handle.
 *
 * # Safety
 * The matrix pointers must reference arrays of the stated sizes and
 * `out` must be a valid location for one pointer.
 */
CtxmpcStatus ctxmpc_model_new(uintptr_t n,
                              uintptr_t m,
                              const double *a,
                              const double *b,
                              const double *q,
                              const double *r,
                              double w_bound,
                              struct CtxmpcModel **out);

/**
 * Release a handle returned by `ctxmpc_model_new`.
 *
 * # Safety
 * `model` must be a pointer previously returned by `ctxmpc_model_new`
 * and not freed since; NULL is a no-op.
 */
void ctxmpc_model_free(struct CtxmpcModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
uintptr_t ctxmpc_model_state_dim(const struct CtxmpcModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
uintptr_t ctxmpc_model_input_dim(const struct CtxmpcModel *model);

/**
 * Spectral radius of the closed loop `A − BK`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
CtxmpcStatus ctxmpc_model_spectral_radius(const struct CtxmpcModel *model, double *out);

/**
 * Max-abs residual of the stored Riccati solution.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
CtxmpcStatus ctxmpc_model_dare_residual(const struct CtxmpcModel *model, double *out);

/**
 * Copy one derived matrix out, row-major. `P`, `F`, `H` are `n×n`;
 * `K` is `m×n`. `cap` is the buffer length in doubles.
 *
 * # Safety
 * `model` must be a live handle; `out` must point to `cap` writable
 * doubles.
 */
CtxmpcStatus ctxmpc_model_matrix(const struct CtxmpcModel *model,
                                 CtxmpcMatrix which,
                                 double *out,
                                 uintptr_t cap);

/**
 * Explicit MPC action for state `x` (length n) and `pred_count`
 * stacked disturbance predictions (row-major, `pred_count × n`).
 * Writes the input (length m) into `u_out`.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
CtxmpcStatus ctxmpc_mpc_action(const struct CtxmpcModel *model,
                               const double *x,
                               const double *predictions,
                               uintptr_t pred_count,
                               double *u_out);

/**
 * Full open-loop batch solution (pred_count × m, row-major) of the
 * windowed program; cross-check route for the explicit action.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
CtxmpcStatus ctxmpc_mpc_action_batch(const struct CtxmpcModel *model,
                                     const double *x,
                                     const double *predictions,
                                     uintptr_t pred_count,
                                     double *u_out);

/**
 * One plant step `x' = Ax + Bu + w`; all vectors length n (u length m).
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
CtxmpcStatus ctxmpc_step(const struct CtxmpcModel *model,
                         const double *x,
                         const double *u,
                         const double *w,
                         double *x_out);

/**
 * Execute a JSON run config: one trace per seed plus a summary under
 * `<out_dir>/<digest>/`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
CtxmpcStatus ctxmpc_run_config(const char *config_path, const char *out_dir);

/**
 * Re-run a stored run directory and byte-compare the traces.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string.
 */
CtxmpcStatus ctxmpc_replay(const char *run_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXMPC_H */
