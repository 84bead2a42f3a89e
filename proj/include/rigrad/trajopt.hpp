#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "rigrad/dynamics.hpp"
#include "rigrad/model.hpp"

namespace rigrad {

// Diagonal quadratic tracking cost.  Per-step weights on position/velocity
// error and control effort, separate terminal weights; the goal velocity is
// zero.
struct QuadraticCost {
  std::vector<double> q_pos;   // J
  std::vector<double> q_vel;   // J
  std::vector<double> r_ctrl;  // J
  std::vector<double> qf_pos;  // J
  std::vector<double> qf_vel;  // J
  JointState goal;
};

QuadraticCost make_cost(std::size_t J, double q_pos, double q_vel, double r_ctrl, double qf_pos,
                        double qf_vel, std::vector<double> goal_q);

struct TrajOptProblem {
  const RobotModel* model = nullptr;
  SimParams params;
  JointState start;
  QuadraticCost cost;
  int horizon = 25;  // control ticks
  std::vector<std::pair<double, double>> torque_bounds;  // J pairs, N m
  int shoot_intervals = 5;
  StepSpec step;
  int max_iterations = 100;
  double rel_tol = 1e-8;
  double defect_penalty = 1e4;
  double defect_tol = 1e-6;
};

struct SolveReport {
  bool converged = false;
  bool line_search_failed = false;
  int iterations = 0;
  double final_cost = 0.0;
  double max_defect = 0.0;
  // (penalty weight, cost) after each accepted step; cost is monotone
  // non-increasing within one penalty phase.
  std::vector<std::pair<double, double>> cost_trace;
};

struct TrajOptResult {
  Trajectory trajectory;
  SolveReport report;
};

// Gauss-Newton multiple shooting with defect-penalty residuals, torque box
// constraints by projection, and backtracking (Armijo) line search.
TrajOptResult solve(const TrajOptProblem& problem);

// Uniform joint-space sampling box for start and goal configurations
// (velocities zero).
struct StateSampler {
  std::vector<double> lo;  // rad, per joint
  std::vector<double> hi;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  std::vector<std::vector<double>> goals;  // sampled goal q per trajectory
};

// K converged trajectories from independently sampled (start, goal) pairs,
// solved in parallel.  Non-converged solutions are dropped and resampled, up
// to 3K attempts; the accepted set is the first K converged attempts in
// attempt order, so the result is independent of the worker count.
Dataset collect_dataset(const RobotModel& model, const SimParams& params, int K,
                        const StateSampler& sampler, const TrajOptProblem& prototype,
                        std::uint64_t seed, int workers);

}  // namespace rigrad
