#ifndef KOOPMAN_DEEPC_H
#define KOOPMAN_DEEPC_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum KdStatus {
  KD_STATUS_OK = 0,
  KD_STATUS_NULL_POINTER = 1,
  KD_STATUS_INVALID_ARGUMENT = 2,
  KD_STATUS_CONFIG = 3,
  KD_STATUS_IO = 4,
  KD_STATUS_DEGENERATE_DATA = 5,
  KD_STATUS_NUMERICAL = 6,
  KD_STATUS_INFEASIBLE = 7,
  KD_STATUS_DIVERGED = 8,
  KD_STATUS_PANIC = 9,
} KdStatus;

/**
 * CLI-equivalent commands for [`kd_experiment_run`].
 */
typedef enum KdCommand {
  KD_COMMAND_SIMULATE = 0,
  KD_COMMAND_TRAIN = 1,
  KD_COMMAND_PREDICT = 2,
  KD_COMMAND_CONTROL = 3,
} KdCommand;

/**
 * Koopman controller built from an experiment's recorded data.
 */
typedef struct KdController KdController;

/**
 * Parsed and validated experiment configuration.
 */
typedef struct KdExperiment KdExperiment;

/**
 * Prediction QP with a fixed data matrix; caches the last solution for
 * [`kd_prediction_layer_vjp`].
 */
typedef struct KdPredictionLayer KdPredictionLayer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated)
 * and returns its length without the terminator, 0 when the last call
 * succeeded. Nothing is written unless `len` exceeds that length, so `buf`
 * may be NULL to query it.
 */
size_t kd_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kd_version(void);

/**
 * Parses and validates a JSON experiment config.
 */
enum KdStatus kd_experiment_from_json(const char *json, struct KdExperiment **out);

/**
 * Loads a config file; relative data and checkpoint paths resolve against
 * the file's directory.
 */
enum KdStatus kd_experiment_load(const char *path, struct KdExperiment **out);

void kd_experiment_free(struct KdExperiment *exp);

enum KdStatus kd_experiment_set_seed(struct KdExperiment *exp, uint64_t seed);

/**
 * Runs a command, writing its files into `out_dir` exactly as the CLI does.
 */
enum KdStatus kd_experiment_run(const struct KdExperiment *exp,
                                enum KdCommand command,
                                const char *out_dir);

/**
 * Builds `min lambda_g |g|^2 + lambda_y |Z g - z|^2 s.t. U g = e` with
 * `Z` (`n_z x n_c`) and `U` (`n_e x n_c`) fixed.
 */
enum KdStatus kd_prediction_layer_new(const double *z_mat,
                                      size_t n_z,
                                      size_t n_c,
                                      const double *u_mat,
                                      size_t n_e,
                                      double lambda_g,
                                      double lambda_y,
                                      struct KdPredictionLayer **out);

void kd_prediction_layer_free(struct KdPredictionLayer *layer);

/**
 * Solves for `g` (`n_c` entries). `kkt_residual` may be NULL.
 */
enum KdStatus kd_prediction_layer_solve(struct KdPredictionLayer *layer,
                                        const double *z_vec,
                                        const double *e_vec,
                                        double *g_out,
                                        double *kkt_residual);

/**
 * Cotangents of `gbar' g` at the last solution with respect to `Z`
 * (`n_z x n_c`), `z` and `e`. Any output pointer may be NULL to skip it.
 */
enum KdStatus kd_prediction_layer_vjp(const struct KdPredictionLayer *layer,
                                      const double *gbar,
                                      double *d_z_mat,
                                      double *d_z_vec,
                                      double *d_e_vec);

/**
 * Builds the Koopman controller of an experiment from its recorded data.
 * Network lifts read their checkpoint from `model_dir` (or the configured
 * path); `model_dir` may be NULL for analytic lifts.
 */
enum KdStatus kd_controller_new(const struct KdExperiment *exp,
                                const char *model_dir,
                                struct KdController **out);

void kd_controller_free(struct KdController *ctrl);

/**
 * Writes `n_u`, `n_y`, `T_ini` and the horizon `N`; any pointer may be NULL.
 */
enum KdStatus kd_controller_dims(const struct KdController *ctrl,
                                 size_t *n_u,
                                 size_t *n_y,
                                 size_t *t_ini,
                                 size_t *horizon);

/**
 * Plans from the histories `u_ini` (`n_u x T_ini`) and `y_ini`
 * (`n_y x T_ini`) at step `t`. Writes the input plan (`n_u x N`) and the
 * planned outputs (`n_y x N`, may be NULL). With `soft` the output box is
 * relaxed by penalized slack. Returns `KD_STATUS_INFEASIBLE` when the hard
 * problem has no solution.
 */
enum KdStatus kd_controller_plan(struct KdController *ctrl,
                                 const double *u_ini,
                                 const double *y_ini,
                                 size_t t,
                                 bool soft,
                                 double *u_plan,
                                 double *y_plan);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPMAN_DEEPC_H */
