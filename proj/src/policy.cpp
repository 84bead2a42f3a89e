#include "rigrad/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace rigrad {
namespace {

void fill_he(Eigen::MatrixXd& W, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(W.cols())));
  for (long i = 0; i < W.rows(); ++i)
    for (long j = 0; j < W.cols(); ++j) W(i, j) = dist(rng);
}

Eigen::MatrixXd relu(const Eigen::MatrixXd& x) { return x.cwiseMax(0.0); }

template <typename Mat>
struct Adam {
  Mat m, v;
  explicit Adam(const Mat& like) : m(Mat::Zero(like.rows(), like.cols())), v(m) {}
  void update(Mat& w, const Mat& g, const TrainConfig& c, long t) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    const double mc = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double vc = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    w -= (c.learning_rate / mc) *
         (m.array() / ((v.array() / vc).sqrt() + c.eps)).matrix();
  }
};

void write_matrix(std::ofstream& out, const Eigen::MatrixXd& m) {
  const std::uint64_t rows = static_cast<std::uint64_t>(m.rows());
  const std::uint64_t cols = static_cast<std::uint64_t>(m.cols());
  out.write(reinterpret_cast<const char*>(&rows), 8);
  out.write(reinterpret_cast<const char*>(&cols), 8);
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), 8);
    }
}

Eigen::MatrixXd read_matrix(std::ifstream& in) {
  std::uint64_t rows = 0, cols = 0;
  in.read(reinterpret_cast<char*>(&rows), 8);
  in.read(reinterpret_cast<char*>(&cols), 8);
  if (!in || rows > 1u << 20 || cols > 1u << 20)
    throw Error(Errc::FormatError, "corrupt policy file: bad matrix header");
  Eigen::MatrixXd m(static_cast<long>(rows), static_cast<long>(cols));
  for (long i = 0; i < m.rows(); ++i)
    for (long j = 0; j < m.cols(); ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), 8);
      m(i, j) = v;
    }
  if (!in) throw Error(Errc::FormatError, "corrupt policy file: truncated matrix data");
  return m;
}

constexpr char kMagic[4] = {'R', 'G', 'P', 'N'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

PolicyNet PolicyNet::init(std::size_t J, std::uint64_t seed) {
  if (J < 1) throw Error(Errc::DimensionMismatch, "policy needs at least one joint");
  PolicyNet net;
  net.J_ = J;
  const long in = static_cast<long>(3 * J);
  net.W1.resize(kHidden, in);
  net.W2.resize(kHidden, kHidden);
  net.W3.resize(static_cast<long>(J), kHidden);
  std::mt19937_64 rng(seed);
  fill_he(net.W1, rng);
  fill_he(net.W2, rng);
  fill_he(net.W3, rng);
  net.b1 = Eigen::VectorXd::Zero(kHidden);
  net.b2 = Eigen::VectorXd::Zero(kHidden);
  net.b3 = Eigen::VectorXd::Zero(static_cast<long>(J));
  net.in_mean = Eigen::VectorXd::Zero(in);
  net.in_std = Eigen::VectorXd::Ones(in);
  return net;
}

Eigen::VectorXd PolicyNet::predict(const Eigen::VectorXd& raw_input) const {
  const Eigen::VectorXd x = (raw_input - in_mean).cwiseQuotient(in_std);
  const Eigen::VectorXd h1 = (W1 * x + b1).cwiseMax(0.0);
  const Eigen::VectorXd h2 = (W2 * h1 + b2).cwiseMax(0.0);
  return W3 * h2 + b3;
}

std::vector<double> PolicyNet::predict(const JointState& state,
                                       std::span<const double> goal_q) const {
  const std::size_t J = J_;
  if (state.q.size() != J || goal_q.size() != J)
    throw Error(Errc::DimensionMismatch, "state/goal size does not match the policy");
  Eigen::VectorXd x(static_cast<long>(3 * J));
  for (std::size_t j = 0; j < J; ++j) {
    x[static_cast<long>(j)] = state.q[j];
    x[static_cast<long>(J + j)] = state.qd[j];
    x[static_cast<long>(2 * J + j)] = goal_q[j];
  }
  const Eigen::VectorXd y = predict(x);
  return std::vector<double>(y.data(), y.data() + y.size());
}

void PolicyNet::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::FormatError, "cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  out.write(reinterpret_cast<const char*>(&kVersion), 4);
  const std::uint64_t J = J_;
  out.write(reinterpret_cast<const char*>(&J), 8);
  write_matrix(out, W1);
  write_matrix(out, b1);
  write_matrix(out, W2);
  write_matrix(out, b2);
  write_matrix(out, W3);
  write_matrix(out, b3);
  write_matrix(out, in_mean);
  write_matrix(out, in_std);
}

PolicyNet PolicyNet::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::FormatError, "cannot open '" + path + "'");
  char magic[4];
  std::uint32_t version = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw Error(Errc::FormatError, "'" + path + "' is not a policy file");
  if (version != kVersion)
    throw Error(Errc::FormatError, "unsupported policy file version " + std::to_string(version));
  std::uint64_t J = 0;
  in.read(reinterpret_cast<char*>(&J), 8);
  PolicyNet net;
  net.J_ = J;
  net.W1 = read_matrix(in);
  net.b1 = read_matrix(in);
  net.W2 = read_matrix(in);
  net.b2 = read_matrix(in);
  net.W3 = read_matrix(in);
  net.b3 = read_matrix(in);
  net.in_mean = read_matrix(in);
  net.in_std = read_matrix(in);
  return net;
}

PairSet dataset_pairs(const Dataset& dataset) {
  if (dataset.trajectories.empty())
    throw Error(Errc::EmptyRollout, "dataset has no trajectories");
  const std::size_t J = dataset.trajectories[0].U.empty()
                            ? dataset.trajectories[0].X[0].q.size()
                            : dataset.trajectories[0].U[0].size();
  std::size_t n = 0;
  for (const Trajectory& t : dataset.trajectories) n += t.U.size();
  PairSet p;
  p.inputs.resize(static_cast<long>(n), static_cast<long>(3 * J));
  p.targets.resize(static_cast<long>(n), static_cast<long>(J));
  long row = 0;
  for (std::size_t k = 0; k < dataset.trajectories.size(); ++k) {
    const Trajectory& t = dataset.trajectories[k];
    const std::vector<double>& goal = dataset.goals[k];
    if (goal.size() != J)
      throw Error(Errc::DimensionMismatch, "goal dimension does not match controls");
    for (std::size_t i = 0; i < t.U.size(); ++i) {
      for (std::size_t j = 0; j < J; ++j) {
        p.inputs(row, static_cast<long>(j)) = t.X[i].q[j];
        p.inputs(row, static_cast<long>(J + j)) = t.X[i].qd[j];
        p.inputs(row, static_cast<long>(2 * J + j)) = goal[j];
        p.targets(row, static_cast<long>(j)) = t.U[i][j];
      }
      ++row;
    }
  }
  return p;
}

double mse(const PolicyNet& net, const PairSet& pairs) {
  double sum = 0.0;
  for (long i = 0; i < pairs.inputs.rows(); ++i) {
    const Eigen::VectorXd y = net.predict(pairs.inputs.row(i).transpose());
    sum += (y - pairs.targets.row(i).transpose()).squaredNorm();
  }
  return sum / static_cast<double>(pairs.targets.size());
}

TrainReport train(PolicyNet& net, const PairSet& pairs, const TrainConfig& cfg) {
  const long n = pairs.inputs.rows();
  if (n == 0) throw Error(Errc::EmptyRollout, "no training pairs");
  if (pairs.inputs.cols() != static_cast<long>(3 * net.dof()) ||
      pairs.targets.cols() != static_cast<long>(net.dof()))
    throw Error(Errc::DimensionMismatch, "pair dimensions do not match the policy");
  if (cfg.epochs < 1 || cfg.learning_rate <= 0.0)
    throw Error(Errc::ConfigError, "epochs must be >= 1 and learning_rate > 0");

  // Standardization statistics over the whole dataset, stored in the net.
  net.in_mean = pairs.inputs.colwise().mean();
  Eigen::VectorXd var = (pairs.inputs.rowwise() - net.in_mean.transpose())
                            .array()
                            .square()
                            .colwise()
                            .mean();
  net.in_std = (var.array().max(1e-16)).sqrt();
  for (long i = 0; i < net.in_std.size(); ++i)
    if (net.in_std[i] < 1e-8) net.in_std[i] = 1.0;  // constant feature

  // Standardized inputs, samples as columns.
  Eigen::MatrixXd X = ((pairs.inputs.rowwise() - net.in_mean.transpose()).array().rowwise() /
                       net.in_std.transpose().array())
                          .transpose();
  Eigen::MatrixXd Y = pairs.targets.transpose();

  std::mt19937_64 rng(cfg.seed);
  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const long n_val = std::min<long>(n - 1, static_cast<long>(std::floor(cfg.val_fraction * static_cast<double>(n))));
  const long n_train = n - n_val;
  std::vector<long> train_idx(order.begin(), order.begin() + n_train);
  std::vector<long> val_idx(order.begin() + n_train, order.end());

  Adam<Eigen::MatrixXd> aW1(net.W1), aW2(net.W2), aW3(net.W3);
  Adam<Eigen::VectorXd> ab1(net.b1), ab2(net.b2), ab3(net.b3);

  auto split_loss = [&](const std::vector<long>& idx) {
    if (idx.empty()) return 0.0;
    double sum = 0.0;
    for (long i : idx) {
      const Eigen::VectorXd h1 = (net.W1 * X.col(i) + net.b1).cwiseMax(0.0);
      const Eigen::VectorXd h2 = (net.W2 * h1 + net.b2).cwiseMax(0.0);
      sum += (net.W3 * h2 + net.b3 - Y.col(i)).squaredNorm();
    }
    return sum / static_cast<double>(idx.size() * net.dof());
  };

  TrainReport report;
  long step = 0;
  const long batch = std::max<long>(1, std::min<long>(cfg.batch_size, n_train));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double epoch_sum = 0.0;
    for (long start = 0; start < n_train; start += batch) {
      const long b = std::min(batch, n_train - start);
      Eigen::MatrixXd Xb(X.rows(), b), Yb(Y.rows(), b);
      for (long c = 0; c < b; ++c) {
        Xb.col(c) = X.col(train_idx[static_cast<std::size_t>(start + c)]);
        Yb.col(c) = Y.col(train_idx[static_cast<std::size_t>(start + c)]);
      }
      const Eigen::MatrixXd z1 = (net.W1 * Xb).colwise() + net.b1;
      const Eigen::MatrixXd h1 = relu(z1);
      const Eigen::MatrixXd z2 = (net.W2 * h1).colwise() + net.b2;
      const Eigen::MatrixXd h2 = relu(z2);
      const Eigen::MatrixXd out = (net.W3 * h2).colwise() + net.b3;

      const Eigen::MatrixXd err = out - Yb;
      epoch_sum += err.squaredNorm();
      // d(loss)/d(out) for loss = sum(err^2) / (batch * J)
      const double scale = 2.0 / static_cast<double>(b * static_cast<long>(net.dof()));
      const Eigen::MatrixXd d_out = scale * err;
      const Eigen::MatrixXd d_h2 = net.W3.transpose() * d_out;
      const Eigen::MatrixXd d_z2 = (z2.array() > 0.0).select(d_h2, 0.0);
      const Eigen::MatrixXd d_h1 = net.W2.transpose() * d_z2;
      const Eigen::MatrixXd d_z1 = (z1.array() > 0.0).select(d_h1, 0.0);

      ++step;
      aW3.update(net.W3, d_out * h2.transpose(), cfg, step);
      aW2.update(net.W2, d_z2 * h1.transpose(), cfg, step);
      aW1.update(net.W1, d_z1 * Xb.transpose(), cfg, step);
      ab3.update(net.b3, d_out.rowwise().sum(), cfg, step);
      ab2.update(net.b2, d_z2.rowwise().sum(), cfg, step);
      ab1.update(net.b1, d_z1.rowwise().sum(), cfg, step);
    }
    const double train_loss = epoch_sum / static_cast<double>(n_train * static_cast<long>(net.dof()));
    if (!std::isfinite(train_loss))
      throw Error(Errc::TrainingDiverged,
                  "training loss became non-finite at epoch " + std::to_string(epoch));
    report.train_loss.push_back(train_loss);
    report.val_loss.push_back(split_loss(val_idx));
  }
  report.final_loss = split_loss(train_idx);
  return report;
}

TrainReport train(PolicyNet& net, const Dataset& dataset, const TrainConfig& cfg) {
  return train(net, dataset_pairs(dataset), cfg);
}

}  // namespace rigrad
