#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rigrad/dynamics.hpp"
#include "rigrad/trajopt.hpp"

namespace rigrad {

// Feed-forward torque policy: [q | qd | q_goal] (3J) -> dense(128, ReLU) ->
// dense(128, ReLU) -> dense(J, linear).  Input standardization statistics
// travel with the network.
class PolicyNet {
 public:
  static constexpr int kHidden = 128;

  // HE initialization: weights ~ Normal(0, 2/fan_in), biases zero,
  // deterministic per seed.
  static PolicyNet init(std::size_t J, std::uint64_t seed);

  std::size_t dof() const { return J_; }

  // Single forward pass; pure function of (net, inputs).
  std::vector<double> predict(const JointState& state, std::span<const double> goal_q) const;
  Eigen::VectorXd predict(const Eigen::VectorXd& raw_input) const;

  // Versioned binary round-trip (layout documented in the README).
  void save(const std::string& path) const;
  static PolicyNet load(const std::string& path);

  // Layer parameters and standardization statistics; exposed for the
  // trainer and for tests.
  Eigen::MatrixXd W1, W2, W3;
  Eigen::VectorXd b1, b2, b3;
  Eigen::VectorXd in_mean, in_std;

 private:
  std::size_t J_ = 0;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 256;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;  // reporting only
};

struct TrainReport {
  std::vector<double> train_loss;  // per epoch, raw torque space
  std::vector<double> val_loss;
  double final_loss = 0.0;
};

// Inputs one row per sample ([q | qd | goal], 3J columns), targets one row
// per sample (J columns, N m).
struct PairSet {
  Eigen::MatrixXd inputs;
  Eigen::MatrixXd targets;
};

// Flattens MPC trajectories into (state, goal) -> torque pairs.
PairSet dataset_pairs(const Dataset& dataset);

// Minibatch Adam on the mean squared error over all target elements.
// Standardization statistics are computed from `pairs` and stored in the
// net.  A non-finite loss aborts with Errc::TrainingDiverged.
TrainReport train(PolicyNet& net, const PairSet& pairs, const TrainConfig& config);
TrainReport train(PolicyNet& net, const Dataset& dataset, const TrainConfig& config);

double mse(const PolicyNet& net, const PairSet& pairs);

}  // namespace rigrad
