#ifndef RLP_H
#define RLP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RlpStatus {
  RLP_STATUS_OK = 0,
  RLP_STATUS_NULL_ARGUMENT = 1,
  RLP_STATUS_INVALID_UTF8 = 2,
  // A config value was rejected; the message names the field.
  RLP_STATUS_VALIDATION = 3,
  RLP_STATUS_PARSE = 4,
  RLP_STATUS_DOMAIN = 5,
  RLP_STATUS_RUNTIME = 6,
  RLP_STATUS_IO = 7,
  RLP_STATUS_OUT_OF_RANGE = 8,
  RLP_STATUS_PANIC = 9,
} RlpStatus;

typedef enum RlpProtocolKind {
  RLP_PROTOCOL_KIND_ALL_CORRECT = 0,
  RLP_PROTOCOL_KIND_N_OR_MORE = 1,
  RLP_PROTOCOL_KIND_BREADCRUMB = 2,
  RLP_PROTOCOL_KIND_SUBTASK = 3,
} RlpProtocolKind;

// Opaque fixed-point set handle.
typedef struct RlpFixedPoints RlpFixedPoints;

// Opaque trajectory handle.
typedef struct RlpTrajectory RlpTrajectory;

// Flat description of a reward protocol. Fields not used by `kind` are
// ignored.
typedef struct RlpProtocol {
  enum RlpProtocolKind kind;
  double eta1;
  // Penalty rate (all-correct).
  double eta2;
  // Threshold (n-or-more).
  size_t n;
  // Per-decision reward (breadcrumb).
  double beta;
  // Subtask length and reward (subtask).
  size_t t0;
  double r_sub;
} RlpProtocol;

// One logged row. `empirical_reward` is NaN for ODE trajectories.
typedef struct RlpRow {
  double alpha;
  double t;
  double r;
  double q;
  double rho;
  double eps_g;
  double expected_reward;
  double empirical_reward;
} RlpRow;

typedef struct RlpFixedPoint {
  double rho;
  bool stable;
  double residual;
} RlpFixedPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *rlp_version(void);

// Copies the calling thread's last error message into `buf` (truncated and
// always NUL-terminated when `len > 0`). Returns the full message length
// excluding the terminator.
//
// # Safety
// `buf` must be null or point to at least `len` writable bytes.
size_t rlp_last_error(char *buf, size_t len);

// Expected `(dR/dalpha, dQ/dalpha)` at `(r, q)` for episodes of length `t`.
//
// # Safety
// `protocol` must point to a valid struct; `dr` and `dq` must be writable.
enum RlpStatus rlp_flow(double r,
                        double q,
                        size_t t,
                        const struct RlpProtocol *protocol,
                        double *dr,
                        double *dq);

// Integrates the order-parameter ODE described by `config`.
//
// # Safety
// `config` must be a NUL-terminated string; `out` must be writable.
enum RlpStatus rlp_ode_integrate(const char *config, struct RlpTrajectory **out);

// Runs one finite-dimension simulation; `seed` replaces the config's seed.
//
// # Safety
// `config` must be a NUL-terminated string; `out` must be writable.
enum RlpStatus rlp_simulate(const char *config, uint64_t seed, struct RlpTrajectory **out);

// Number of rows, or 0 for a null handle.
//
// # Safety
// `traj` must be null or a live handle.
size_t rlp_trajectory_len(const struct RlpTrajectory *traj);

// # Safety
// `traj` must be a live handle and `row` writable.
enum RlpStatus rlp_trajectory_row(const struct RlpTrajectory *traj,
                                  size_t index,
                                  struct RlpRow *row);

// # Safety
// `traj` must be null or a handle not yet freed.
void rlp_trajectory_free(struct RlpTrajectory *traj);

// Fixed points of the fixed-norm overlap flow under an all-correct reward
// with penalty.
//
// # Safety
// `out` must be writable.
enum RlpStatus rlp_fixed_points(size_t t,
                                double eta1,
                                double eta2,
                                double q,
                                struct RlpFixedPoints **out);

// # Safety
// `set` must be null or a live handle.
size_t rlp_fixed_points_len(const struct RlpFixedPoints *set);

// Points are ordered by increasing `rho`.
//
// # Safety
// `set` must be a live handle and `point` writable.
enum RlpStatus rlp_fixed_points_get(const struct RlpFixedPoints *set,
                                    size_t index,
                                    struct RlpFixedPoint *point);

// # Safety
// `set` must be null or a handle not yet freed.
void rlp_fixed_points_free(struct RlpFixedPoints *set);

// Smallest penalty at which a second stable fixed point appears.
//
// # Safety
// `eta_crit` must be writable.
enum RlpStatus rlp_critical_penalty(size_t t, double eta1, double q, double tol, double *eta_crit);

// Runs a full experiment config, as the `rlp` binary does. `output_dir`
// may be null, in which case the config's own directory setting is used.
//
// # Safety
// `config_path` must be a NUL-terminated string; `output_dir` must be null
// or NUL-terminated.
enum RlpStatus rlp_run_experiment(const char *config_path,
                                  const char *output_dir,
                                  uint64_t seed_offset);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RLP_H */
