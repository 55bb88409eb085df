#ifndef NCFLOW_H
#define NCFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values 2 to 5 match the command-line exit codes.
 */
typedef enum NcflowStatus {
  NCFLOW_STATUS_OK = 0,
  /**
   * Null pointer, bad length, non-UTF-8 string or out-of-range value.
   */
  NCFLOW_STATUS_INVALID_ARGUMENT = 1,
  NCFLOW_STATUS_CONFIG = 2,
  NCFLOW_STATUS_DATA = 3,
  NCFLOW_STATUS_FLOW = 4,
  NCFLOW_STATUS_VERIFICATION = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  NCFLOW_STATUS_INTERNAL = 6,
} NcflowStatus;

typedef enum NcflowLoss {
  NCFLOW_LOSS_EXPONENTIAL = 0,
  NCFLOW_LOSS_LOGISTIC = 1,
  NCFLOW_LOSS_CROSS_ENTROPY = 2,
} NcflowLoss;

/**
 * Opaque dataset handle.
 */
typedef struct NcflowDataset NcflowDataset;

/**
 * Opaque network-parameter handle.
 */
typedef struct NcflowParams NcflowParams;

/**
 * Opaque trajectory handle.
 */
typedef struct NcflowTrajectory NcflowTrajectory;

typedef struct NcflowCertificate {
  double mu_s;
  double mu_d;
  double x_max;
  double x_min;
  double strict_ratio;
  bool separable;
  bool strict;
} NcflowCertificate;

/**
 * Flow settings. `adaptive = false` uses the fixed step `eta`; otherwise
 * `η = min(cap, eta / L)`. A non-positive `loss_threshold` disables that stop.
 */
typedef struct NcflowFlowConfig {
  bool adaptive;
  double eta;
  double cap;
  size_t max_steps;
  size_t log_every;
  double loss_threshold;
} NcflowFlowConfig;

typedef struct NcflowRecord {
  size_t step;
  double time;
  double loss;
  double grad_norm;
  double max_balance_gap;
  bool separated;
} NcflowRecord;

typedef struct NcflowCollapse {
  double nc1;
  double nc2;
  double nc3;
  double max_rank1_residual;
  double min_w_direction_cosine;
  double min_v_direction_cosine;
  double duality_residual;
  double orthogonality;
  double max_cross_class_feature_gram;
} NcflowCollapse;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next `ncflow_*` call on the same thread.
 */
const char *ncflow_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ncflow_version(void);

/**
 * Dataset from `n` row-major points of dimension `d` and labels in `0..num_classes`.
 */
enum NcflowStatus ncflow_dataset_new(const double *points,
                                     size_t n,
                                     size_t d,
                                     const uint32_t *labels,
                                     size_t num_classes,
                                     struct NcflowDataset **out_dataset);

/**
 * Orthogonally separable data around a random simplex frame.
 */
enum NcflowStatus ncflow_dataset_generate(size_t num_classes,
                                          size_t dim,
                                          size_t points_per_class,
                                          double cone_half_angle,
                                          double norm_min,
                                          double norm_max,
                                          uint64_t seed,
                                          struct NcflowDataset **out_dataset);

/**
 * Reads a dataset CSV. `num_classes = 0` infers the count from the labels.
 */
enum NcflowStatus ncflow_dataset_read_csv(const char *csv_path,
                                          size_t num_classes,
                                          struct NcflowDataset **out_dataset);

void ncflow_dataset_free(struct NcflowDataset *dataset);

/**
 * Writes the number of points, the dimension and the number of classes.
 */
enum NcflowStatus ncflow_dataset_shape(const struct NcflowDataset *dataset,
                                       size_t *out_n,
                                       size_t *out_dim,
                                       size_t *out_num_classes);

enum NcflowStatus ncflow_dataset_certificate(const struct NcflowDataset *dataset,
                                             struct NcflowCertificate *out_certificate);

/**
 * Class-wise max margins `γ_k` and scales `s_k`; both buffers hold `num_classes` entries.
 */
enum NcflowStatus ncflow_dataset_margins(const struct NcflowDataset *dataset,
                                         double *out_gammas,
                                         double *out_scales,
                                         size_t len);

/**
 * Parameters from neuron-major weights: `w` is `width × dim`, `v` is `width × output_dim`.
 */
enum NcflowStatus ncflow_params_new(const double *w,
                                    const double *v,
                                    size_t dim,
                                    size_t output_dim,
                                    size_t width,
                                    enum NcflowLoss loss,
                                    struct NcflowParams **out_params);

/**
 * Balanced Gaussian shapes scaled by `epsilon`.
 */
enum NcflowStatus ncflow_params_random_balanced(size_t dim,
                                                size_t output_dim,
                                                size_t width,
                                                double epsilon,
                                                uint64_t seed,
                                                enum NcflowLoss loss,
                                                struct NcflowParams **out_params);

/**
 * Cross-entropy parameters seeded from data points and pseudo-labels. The
 * neuron-to-class partition (`width` entries) is written to `out_partition`.
 */
enum NcflowStatus ncflow_params_data_seeded(const struct NcflowDataset *dataset,
                                            size_t width,
                                            double epsilon,
                                            uint64_t seed,
                                            size_t *out_partition,
                                            struct NcflowParams **out_params);

void ncflow_params_free(struct NcflowParams *params);

/**
 * Writes the input dimension, output dimension and width.
 */
enum NcflowStatus ncflow_params_shape(const struct NcflowParams *params,
                                      size_t *out_dim,
                                      size_t *out_output_dim,
                                      size_t *out_width);

/**
 * Copies the weights out in neuron-major order; the buffers hold
 * `width · dim` and `width · output_dim` entries.
 */
enum NcflowStatus ncflow_params_weights(const struct NcflowParams *params,
                                        double *out_w,
                                        size_t w_len,
                                        double *out_v,
                                        size_t v_len);

/**
 * Loss and gradients (neuron-major, same sizes as the weights). Gradient
 * buffers may be null when only the loss is wanted.
 */
enum NcflowStatus ncflow_loss_and_gradients(const struct NcflowParams *params,
                                            const struct NcflowDataset *dataset,
                                            double subgrad_at_zero,
                                            double *out_loss,
                                            double *out_dw,
                                            double *out_dv);

/**
 * Explicit-Euler gradient flow. `partition` (`width` entries) may be null to
 * read it off the output weights.
 */
enum NcflowStatus ncflow_flow_run(const struct NcflowParams *params,
                                  const struct NcflowDataset *dataset,
                                  const size_t *partition,
                                  const struct NcflowFlowConfig *config,
                                  struct NcflowTrajectory **out_trajectory);

void ncflow_trajectory_free(struct NcflowTrajectory *trajectory);

/**
 * Number of logged records.
 */
enum NcflowStatus ncflow_trajectory_len(const struct NcflowTrajectory *trajectory, size_t *out_len);

enum NcflowStatus ncflow_trajectory_record(const struct NcflowTrajectory *trajectory,
                                           size_t index,
                                           struct NcflowRecord *out_record);

/**
 * First separated step, or −1 when separation never occurred. `out_reverts`
 * receives the number of later records where it failed.
 */
enum NcflowStatus ncflow_trajectory_separation(const struct NcflowTrajectory *trajectory,
                                               int64_t *out_t_star,
                                               size_t *out_reverts);

/**
 * New handle holding the final parameters of the trajectory.
 */
enum NcflowStatus ncflow_trajectory_final_params(const struct NcflowTrajectory *trajectory,
                                                 struct NcflowParams **out_params);

/**
 * Collapse residuals of the direction `params/‖params‖`. `partition` may be null.
 */
enum NcflowStatus ncflow_collapse_report(const struct NcflowParams *params,
                                         const struct NcflowDataset *dataset,
                                         const size_t *partition,
                                         struct NcflowCollapse *out_report);

/**
 * Runs an experiment config like `ncflow run`. `out_dir` may be null for the
 * default location. `out_exit_code` receives the command-line exit code.
 */
enum NcflowStatus ncflow_run_config(const char *config_path,
                                    const char *out_dir,
                                    int32_t *out_exit_code);

/**
 * Re-verifies a run directory like `ncflow verify`.
 */
enum NcflowStatus ncflow_verify_run(const char *run_dir, bool *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCFLOW_H */
