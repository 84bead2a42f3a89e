#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rigrad/dynamics.hpp"
#include "rigrad/model.hpp"

namespace rigrad {

// Joint-space data recorded from the rig (or loaded from file) at 25 Hz.
// |q_obs| == |u_cmd| + 1.
struct ObservedRollout {
  enum class Source { kVirtualRig, kFile };
  std::vector<double> sample_times;            // s
  std::vector<std::vector<double>> q_obs;      // per sample, J rad
  std::vector<std::vector<double>> qd_obs;     // per sample, J rad/s
  std::vector<std::vector<double>> u_cmd;      // per tick, J N m
  Source source = Source::kVirtualRig;
  bool truncated = false;  // stopped early by the state safety box

  std::size_t ticks() const { return u_cmd.size(); }
  double sample_period() const {
    return sample_times.size() > 1 ? sample_times[1] - sample_times[0] : 0.04;
  }
  void validate() const;
};

struct SysIdWindow {
  std::size_t start_index = 0;  // tick
  double duration = 0.2;        // s
};

// Eq-style quadratic pull toward the anchor (p_init), per flat parameter.
struct RegularizerSpec {
  std::vector<double> alpha;   // >= 0, flat length
  std::vector<double> anchor;  // flat p_init

  static RegularizerSpec zero(const RobotModel& model, const SimParams& p_init);
  // alpha_p = scale / max(p_init_p^2, 1), a dimensionless relative pull.
  static RegularizerSpec scale_normalized(const RobotModel& model, const SimParams& p_init,
                                          double scale = 1e-3);
};

// Dense per-joint targets at the simulation step, linearly interpolated
// between the 25 Hz knots.
struct UpsampledTargets {
  double dt = 0.0;
  std::vector<std::vector<double>> q;  // per substep time (including t0), J
};
UpsampledTargets upsample_linear(const ObservedRollout& obs, double dt);

struct ResidualEval {
  double value = std::numeric_limits<double>::infinity();
  std::vector<double> terms;  // stacked: data terms (sample-major), then reg terms
  bool diverged = false;
};

// Eq-2 residual: sum of squared joint-space differences between the
// simulated window rollout and the upsampled observations, plus the
// regularizer.  Diverging simulations yield an infinite value with
// diverged=true rather than throwing, so solvers can reject the point.
ResidualEval residual(const RobotModel& model, const SimParams& p, const SysIdWindow& window,
                      const ObservedRollout& obs, const RegularizerSpec& reg,
                      const StepSpec& step);

// ---------------------------------------------------------------------------
// Generic local solvers (the analytic test hooks drive these directly).
// ---------------------------------------------------------------------------

// Returns f(x); fills grad (same length as x) when grad is non-empty.
// An infinite return marks an unevaluable point.
using ScalarObjective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct LbfgsOptions {
  int max_iterations = 100;
  int memory = 10;
  double grad_tol = 1e-10;
  double c1 = 1e-4;  // strong Wolfe
  double c2 = 0.9;
};

struct LbfgsReport {
  bool converged = false;
  bool line_search_failed = false;
  int iterations = 0;
  double final_value = std::numeric_limits<double>::infinity();
  std::vector<double> trace;  // objective after each accepted step
};

LbfgsReport lbfgs_minimize(const ScalarObjective& f, std::vector<double>& x,
                           const LbfgsOptions& opts);

// Fills r(x); when jac is non-null also fills the |r| x |x| Jacobian.
using VectorResidualFn =
    std::function<void(std::span<const double> x, std::vector<double>& r, Eigen::MatrixXd* jac)>;

struct LmOptions {
  int max_iterations = 50;
  double lambda_init = 1e-3;
  double lambda_max = 1e12;
  double step_tol = 1e-14;
};

struct LmReport {
  bool converged = false;
  bool lambda_exhausted = false;  // best-so-far returned with lambda > max
  int iterations = 0;
  double final_cost = std::numeric_limits<double>::infinity();  // sum of squares
  std::vector<double> trace;
};

// Levenberg-Marquardt with Marquardt scaling; trial steps are projected into
// [lo, hi] and rejected steps shrink the trust region via lambda.
LmReport lm_minimize(const VectorResidualFn& f, std::vector<double>& x,
                     std::span<const double> lo, std::span<const double> hi,
                     const LmOptions& opts);

// ---------------------------------------------------------------------------
// Parameter identification.
// ---------------------------------------------------------------------------

struct SysIdBudget {
  int max_iterations = 60;
};

struct SysIdResult {
  SimParams params;
  double residual = std::numeric_limits<double>::infinity();
  bool converged = false;
  bool flagged = false;  // line search / lambda exhaustion
  int iterations = 0;
  std::vector<double> trace;
};

// Paper-style default bounds around p_init: +-20% for gravity, mass and
// inertia; damping in [0, 18]; force_pd in [-1.5, 1.5].
std::pair<std::vector<double>, std::vector<double>> default_bounds(const RobotModel& model,
                                                                   const SimParams& p_init);

// L-BFGS on the scalar residual; gradients from one reverse sweep per
// evaluation.
SysIdResult optimize_unbounded(const RobotModel& model, const SimParams& p0,
                               const SysIdWindow& window, const ObservedRollout& obs,
                               const RegularizerSpec& reg, const SysIdBudget& budget,
                               const StepSpec& step);

// Levenberg-Marquardt on the stacked residual vector; one reverse sweep per
// residual term builds the Jacobian.
SysIdResult optimize_bounded(const RobotModel& model, const SimParams& p0,
                             std::span<const double> lo, std::span<const double> hi,
                             const SysIdWindow& window, const ObservedRollout& obs,
                             const RegularizerSpec& reg, const SysIdBudget& budget,
                             const StepSpec& step);

// ---------------------------------------------------------------------------
// Parallel basin hopping.
// ---------------------------------------------------------------------------

struct LocalSolveResult {
  std::vector<double> x;
  double value = std::numeric_limits<double>::infinity();
  bool flagged = false;
};

// Generic engine: worker 0 starts from `center`, workers 1..W-1 from uniform
// draws in [start_lo, start_hi].  Each worker alternates a local solve with a
// Gaussian hop from its best point, accepting improvements.  The wall clock
// is only checked between local solves, so overrun is expected and reported.
struct BasinHopProblem {
  std::function<LocalSolveResult(std::span<const double> x0, int worker)> local_solve;
  std::function<void(std::vector<double>&)> project;  // optional clamp
  std::vector<double> center;
  std::vector<double> start_lo, start_hi;
  std::vector<double> hop_scale;
  int workers = 4;
  int rounds = 3;            // local solves per worker
  double wall_clock_s = 0;  // 0 disables the time cap
  std::uint64_t seed = 0;
};

struct WorkerTrace {
  std::vector<double> round_values;  // local-solve result per round
  double best_value = std::numeric_limits<double>::infinity();
};

struct BasinHopResult {
  std::vector<double> x;
  double value = std::numeric_limits<double>::infinity();
  int best_worker = -1;
  bool wall_clock_exceeded = false;
  std::vector<WorkerTrace> traces;
};

BasinHopResult basin_hop_engine(const BasinHopProblem& problem);

enum class SysIdSolver { kUnbounded, kBounded };

struct BasinHopSpec {
  SysIdSolver solver = SysIdSolver::kUnbounded;
  int workers = 4;
  int rounds = 3;
  double wall_clock_s = 0.0;
  double hop_rel = 0.1;  // hop scale relative to max(|p_init|, 0.1) per parameter
  std::uint64_t seed = 0;
  SysIdBudget local_budget;
  double ram_budget_bytes = 8.0 * (1ull << 30);
};

struct SysIdBasinResult {
  SimParams params;
  double residual = std::numeric_limits<double>::infinity();
  bool wall_clock_exceeded = false;
  std::vector<WorkerTrace> traces;
};

// Bytes of tape one worker needs to record a window rollout, measured by a
// one-substep probe.  basin_hop refuses worker counts whose combined estimate
// exceeds the configured RAM budget.
std::size_t estimate_tape_bytes(const RobotModel& model, const SysIdWindow& window,
                                const StepSpec& step);

SysIdBasinResult basin_hop(const RobotModel& model, const SimParams& p_center,
                           const SysIdWindow& window, const ObservedRollout& obs,
                           const RegularizerSpec& reg, const BasinHopSpec& spec,
                           const StepSpec& step);

}  // namespace rigrad
