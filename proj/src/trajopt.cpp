#include "rigrad/trajopt.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>
#include <thread>

#include <Eigen/Dense>

#include "rigrad/dualn.hpp"

namespace rigrad {
namespace {

constexpr int kChunk = 9;  // derivative slots per linearization pass
using Lin = DualN<kChunk>;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Dims {
  std::size_t J;       // actuated joints
  int H;               // horizon ticks
  int S;               // shooting segments
  int Hs;              // ticks per segment
  std::size_t nu;      // control variables
  std::size_t nx;      // node-state variables
  std::size_t n_rows;  // residual rows

  std::size_t u_col(int t) const { return static_cast<std::size_t>(t) * J; }
  std::size_t node_col(int s) const { return nu + static_cast<std::size_t>(s - 1) * 2 * J; }
};

class GnmsSolver {
 public:
  explicit GnmsSolver(const TrajOptProblem& p)
      : p_(p), solver_(*p.model), lin_solver_(*p.model) {
    d_.J = p.model->actuated_joint_count();
    d_.H = p.horizon;
    d_.S = p.shoot_intervals;
    if (d_.H < 2) throw Error(Errc::ConfigError, "horizon must be at least 2 ticks");
    if (d_.S < 1 || d_.H % d_.S != 0)
      throw Error(Errc::ConfigError, "horizon (" + std::to_string(d_.H) +
                                         ") must be divisible by shoot_intervals (" +
                                         std::to_string(d_.S) + ")");
    d_.Hs = d_.H / d_.S;
    d_.nu = static_cast<std::size_t>(d_.H) * d_.J;
    d_.nx = static_cast<std::size_t>(d_.S - 1) * 2 * d_.J;
    // Rows: interior+node tracking (H-1 ticks), terminal, controls, defects.
    d_.n_rows = static_cast<std::size_t>(d_.H - 1) * 2 * d_.J + 2 * d_.J + d_.nu +
                static_cast<std::size_t>(d_.S - 1) * 2 * d_.J;

    solver_.set_params(p.params);
    lin_solver_.set_params(lift_params<Lin>(p.params));

    sqw_.resize(2 * d_.J);
    sqf_.resize(2 * d_.J);
    sr_.resize(d_.J);
    for (std::size_t j = 0; j < d_.J; ++j) {
      sqw_[j] = std::sqrt(p.cost.q_pos[j]);
      sqw_[d_.J + j] = std::sqrt(p.cost.q_vel[j]);
      sqf_[j] = std::sqrt(p.cost.qf_pos[j]);
      sqf_[d_.J + j] = std::sqrt(p.cost.qf_vel[j]);
      sr_[j] = std::sqrt(p.cost.r_ctrl[j]);
    }
  }

  TrajOptResult run() {
    const std::size_t nz = d_.nu + d_.nx;
    Eigen::VectorXd z = Eigen::VectorXd::Zero(static_cast<long>(nz));
    init_nodes_from_rollout(z);
    project(z);

    double mu = p_.defect_penalty;
    SolveReport report;
    Eigen::VectorXd r(static_cast<long>(d_.n_rows));
    Eigen::MatrixXd Jm(static_cast<long>(d_.n_rows), static_cast<long>(nz));

    double cost = simulate_and_residual(z, mu, &r);
    Eigen::VectorXd best_z = z;
    double best_cost = cost;

    for (int iter = 0; iter < p_.max_iterations; ++iter) {
      report.iterations = iter + 1;
      build_jacobian(z, mu, Jm);

      Eigen::MatrixXd JtJ = Jm.transpose() * Jm;
      JtJ.diagonal().array() += 1e-10;
      Eigen::VectorXd g = Jm.transpose() * r;
      if (g.lpNorm<Eigen::Infinity>() < 1e-12 * std::max(1.0, cost)) {
        const double defect = max_defect(z);
        if (defect > p_.defect_tol && mu < 1e12) {
          mu *= 2.0;
          cost = simulate_and_residual(z, mu, &r);
          continue;
        }
        report.converged = defect <= p_.defect_tol;
        break;
      }
      Eigen::VectorXd dz = JtJ.ldlt().solve(-g);
      if (dz.lpNorm<Eigen::Infinity>() <
          1e-11 * std::max(1.0, z.lpNorm<Eigen::Infinity>())) {
        // At the optimum of this penalty phase.
        const double defect = max_defect(z);
        if (defect > p_.defect_tol && mu < 1e12) {
          mu *= 2.0;
          cost = simulate_and_residual(z, mu, &r);
          continue;
        }
        report.converged = defect <= p_.defect_tol;
        break;
      }

      // Projected backtracking line search with sufficient decrease
      // measured against the step actually taken.
      double alpha = 1.0;
      bool accepted = false;
      Eigen::VectorXd z_new;
      double cost_new = 0.0;
      for (int ls = 0; ls < 24; ++ls, alpha *= 0.5) {
        z_new = z + alpha * dz;
        project(z_new);
        const Eigen::VectorXd step = z_new - z;
        const double slope = g.dot(step);
        if (slope >= 0.0) continue;
        cost_new = simulate_and_residual(z_new, mu, &r);
        if (cost_new <= cost + 1e-4 * slope) {
          accepted = true;
          break;
        }
      }
      if (!accepted) {
        report.line_search_failed = true;
        break;
      }
      const double decrease = cost - cost_new;
      z = z_new;
      cost = cost_new;
      report.cost_trace.emplace_back(mu, cost);
      if (cost < best_cost) {
        best_cost = cost;
        best_z = z;
      }

      if (decrease < p_.rel_tol * std::max(1.0, cost)) {
        const double defect = max_defect(z);
        if (defect > p_.defect_tol && mu < 1e12) {
          mu *= 2.0;  // defect stall: stiffen the penalty and keep going
          cost = simulate_and_residual(z, mu, &r);
          continue;
        }
        report.converged = defect <= p_.defect_tol;
        break;
      }
    }

    if (!report.converged && best_cost < cost) {
      z = best_z;
      simulate_and_residual(z, mu, &r);
    }
    report.max_defect = max_defect(z);
    report.final_cost = simulate_and_residual(z, mu, &r);
    return {replay(z), report};
  }

 private:
  using State = Eigen::VectorXd;  // [q; qd], 2J

  State start_state() const {
    State x(static_cast<long>(2 * d_.J));
    for (std::size_t j = 0; j < d_.J; ++j) {
      x[static_cast<long>(j)] = p_.start.q[j];
      x[static_cast<long>(d_.J + j)] = p_.start.qd[j];
    }
    return x;
  }

  State node_state(const Eigen::VectorXd& z, int s) const {
    if (s == 0) return start_state();
    return z.segment(static_cast<long>(d_.node_col(s)), static_cast<long>(2 * d_.J));
  }

  // Clamp every control variable into the torque box.
  void project(Eigen::VectorXd& z) const {
    for (int t = 0; t < d_.H; ++t)
      for (std::size_t j = 0; j < d_.J; ++j) {
        double& u = z[static_cast<long>(d_.u_col(t) + j)];
        u = std::clamp(u, p_.torque_bounds[j].first, p_.torque_bounds[j].second);
      }
  }

  // Seed the shooting nodes with a zero-control rollout so initial defects
  // vanish.
  void init_nodes_from_rollout(Eigen::VectorXd& z) {
    std::vector<double> q = p_.start.q, qd = p_.start.qd;
    std::vector<double> tau(d_.J, 0.0);
    for (int t = 0; t < d_.H; ++t) {
      try {
        step_tick(solver_, q, qd, std::span<const double>(tau), p_.step, t);
      } catch (const DivergedError&) {
        break;  // leave remaining nodes at the last finite state
      }
      if ((t + 1) % d_.Hs == 0 && (t + 1) / d_.Hs < d_.S) {
        const int s = (t + 1) / d_.Hs;
        for (std::size_t j = 0; j < d_.J; ++j) {
          z[static_cast<long>(d_.node_col(s) + j)] = q[j];
          z[static_cast<long>(d_.node_col(s) + d_.J + j)] = qd[j];
        }
      }
    }
  }

  State tick(State x, std::span<const double> u) {
    std::vector<double> q(x.data(), x.data() + d_.J);
    std::vector<double> qd(x.data() + d_.J, x.data() + 2 * d_.J);
    step_tick(solver_, q, qd, u, p_.step);
    for (std::size_t j = 0; j < d_.J; ++j) {
      x[static_cast<long>(j)] = q[j];
      x[static_cast<long>(d_.J + j)] = qd[j];
    }
    return x;
  }

  // Residual stacking order: per tick t=1..H-1 the 2J tracking rows, then 2J
  // terminal rows, then H*J control rows, then (S-1)*2J defect rows.
  double simulate_and_residual(const Eigen::VectorXd& z, double mu, Eigen::VectorXd* r_out) {
    Eigen::VectorXd& r = *r_out;
    const double smu = std::sqrt(mu);
    try {
      for (int s = 0; s < d_.S; ++s) {
        State x = node_state(z, s);
        for (int l = 0; l < d_.Hs; ++l) {
          const int t = s * d_.Hs + l;
          x = tick(x, std::span<const double>(z.data() + d_.u_col(t), d_.J));
          const int tn = t + 1;
          if (tn == d_.H) {
            for (std::size_t j = 0; j < 2 * d_.J; ++j)
              r[row_terminal(j)] = sqf_[j] * (x[static_cast<long>(j)] - goal(j));
          } else if (tn % d_.Hs == 0) {
            // Segment boundary: the tracked state is the next node variable;
            // this simulated end enters the defect row instead.
            const int sn = tn / d_.Hs;
            const State n = node_state(z, sn);
            for (std::size_t j = 0; j < 2 * d_.J; ++j) {
              r[row_track(tn, j)] = sqw_[j] * (n[static_cast<long>(j)] - goal(j));
              r[row_defect(s, j)] = smu * (x[static_cast<long>(j)] - n[static_cast<long>(j)]);
            }
          } else {
            for (std::size_t j = 0; j < 2 * d_.J; ++j)
              r[row_track(tn, j)] = sqw_[j] * (x[static_cast<long>(j)] - goal(j));
          }
        }
      }
    } catch (const DivergedError&) {
      return std::numeric_limits<double>::infinity();
    }
    for (int t = 0; t < d_.H; ++t)
      for (std::size_t j = 0; j < d_.J; ++j)
        r[row_ctrl(t, j)] = sr_[j] * z[static_cast<long>(d_.u_col(t) + j)];
    return 0.5 * r.squaredNorm();
  }

  double max_defect(const Eigen::VectorXd& z) {
    double worst = 0.0;
    try {
      for (int s = 0; s + 1 < d_.S; ++s) {
        State x = node_state(z, s);
        for (int l = 0; l < d_.Hs; ++l)
          x = tick(x, std::span<const double>(z.data() + d_.u_col(s * d_.Hs + l), d_.J));
        const State n = node_state(z, s + 1);
        worst = std::max(worst, (x - n).cwiseAbs().maxCoeff());
      }
    } catch (const DivergedError&) {
      return std::numeric_limits<double>::infinity();
    }
    return worst;
  }

  // Per-tick linearization: A = dx'/dx (2Jx2J), B = dx'/du (2JxJ), evaluated
  // with chunked forward duals through the substep integrator.
  void linearize_tick(const State& x, std::span<const double> u, Eigen::MatrixXd& A,
                      Eigen::MatrixXd& B) {
    const int dirs = static_cast<int>(3 * d_.J);
    for (int base = 0; base < dirs; base += kChunk) {
      std::vector<Lin> q(d_.J), qd(d_.J), tau(d_.J);
      for (std::size_t j = 0; j < d_.J; ++j) {
        q[j] = Lin::seeded(x[static_cast<long>(j)], static_cast<int>(j) - base);
        qd[j] = Lin::seeded(x[static_cast<long>(d_.J + j)], static_cast<int>(d_.J + j) - base);
        tau[j] = Lin::seeded(u[j], static_cast<int>(2 * d_.J + j) - base);
      }
      step_tick(lin_solver_, q, qd, std::span<const Lin>(tau), p_.step);
      const int hi = std::min(dirs - base, kChunk);
      for (std::size_t j = 0; j < d_.J; ++j)
        for (int c = 0; c < hi; ++c) {
          const int col = base + c;
          const double dq = q[j].d[static_cast<std::size_t>(c)];
          const double dqd = qd[j].d[static_cast<std::size_t>(c)];
          if (col < static_cast<int>(2 * d_.J)) {
            A(static_cast<long>(j), col) = dq;
            A(static_cast<long>(d_.J + j), col) = dqd;
          } else {
            B(static_cast<long>(j), col - static_cast<int>(2 * d_.J)) = dq;
            B(static_cast<long>(d_.J + j), col - static_cast<int>(2 * d_.J)) = dqd;
          }
        }
    }
  }

  void build_jacobian(const Eigen::VectorXd& z, double mu, Eigen::MatrixXd& Jm) {
    Jm.setZero();
    const double smu = std::sqrt(mu);
    const long twoJ = static_cast<long>(2 * d_.J);
    Eigen::MatrixXd A(twoJ, twoJ), B(twoJ, static_cast<long>(d_.J));
    // Phi = dx_t/d(node), Psi[k] = dx_t/du_k for controls inside the segment.
    Eigen::MatrixXd Phi(twoJ, twoJ);
    std::vector<Eigen::MatrixXd> Psi;

    for (int s = 0; s < d_.S; ++s) {
      State x = node_state(z, s);
      Phi.setIdentity();
      Psi.assign(static_cast<std::size_t>(d_.Hs), Eigen::MatrixXd());
      for (int l = 0; l < d_.Hs; ++l) {
        const int t = s * d_.Hs + l;
        const std::span<const double> u(z.data() + d_.u_col(t), d_.J);
        linearize_tick(x, u, A, B);
        x = tick(x, u);
        Phi = A * Phi;
        for (int k = 0; k < l; ++k) Psi[static_cast<std::size_t>(k)] = A * Psi[static_cast<std::size_t>(k)];
        Psi[static_cast<std::size_t>(l)] = B;

        const int tn = t + 1;
        long row0 = -1;
        if (tn == d_.H) {
          row0 = row_terminal(0);
        } else if (tn % d_.Hs != 0) {
          row0 = row_track(tn, 0);
        }
        if (row0 >= 0) {
          const std::vector<double>& w = (tn == d_.H) ? sqf_ : sqw_;
          for (std::size_t j = 0; j < 2 * d_.J; ++j) {
            const long row = row0 + static_cast<long>(j);
            if (s > 0)
              Jm.block(row, static_cast<long>(d_.node_col(s)), 1, twoJ) =
                  w[j] * Phi.row(static_cast<long>(j));
            for (int k = 0; k <= l; ++k)
              Jm.block(row, static_cast<long>(d_.u_col(s * d_.Hs + k)), 1, static_cast<long>(d_.J)) =
                  w[j] * Psi[static_cast<std::size_t>(k)].row(static_cast<long>(j));
          }
        }
      }
      // Defect rows for this segment end / node tracking rows for the node.
      if (s + 1 < d_.S) {
        for (std::size_t j = 0; j < 2 * d_.J; ++j) {
          const long row = row_defect(s, j);
          if (s > 0)
            Jm.block(row, static_cast<long>(d_.node_col(s)), 1, twoJ) =
                smu * Phi.row(static_cast<long>(j));
          for (int k = 0; k < d_.Hs; ++k)
            Jm.block(row, static_cast<long>(d_.u_col(s * d_.Hs + k)), 1, static_cast<long>(d_.J)) =
                smu * Psi[static_cast<std::size_t>(k)].row(static_cast<long>(j));
          Jm(row, static_cast<long>(d_.node_col(s + 1) + j)) = -smu;
          Jm(row_track((s + 1) * d_.Hs, static_cast<std::size_t>(0)) + static_cast<long>(j),
             static_cast<long>(d_.node_col(s + 1) + j)) = sqw_[j];
        }
      }
    }
    for (int t = 0; t < d_.H; ++t)
      for (std::size_t j = 0; j < d_.J; ++j)
        Jm(row_ctrl(t, j), static_cast<long>(d_.u_col(t) + j)) = sr_[j];
  }

  Trajectory replay(const Eigen::VectorXd& z) {
    Trajectory traj;
    traj.X.push_back(p_.start);
    traj.times.push_back(0.0);
    State x = start_state();
    for (int t = 0; t < d_.H; ++t) {
      const std::span<const double> u(z.data() + d_.u_col(t), d_.J);
      x = tick(x, u);
      traj.U.emplace_back(u.begin(), u.end());
      JointState js;
      js.q.assign(x.data(), x.data() + d_.J);
      js.qd.assign(x.data() + d_.J, x.data() + 2 * d_.J);
      traj.X.push_back(std::move(js));
      traj.times.push_back((t + 1) * p_.step.control_period());
    }
    return traj;
  }

  double goal(std::size_t j) const {
    return j < d_.J ? p_.cost.goal.q[j] : p_.cost.goal.qd[j - d_.J];
  }

  long row_track(int t, std::size_t j) const {
    return static_cast<long>(static_cast<std::size_t>(t - 1) * 2 * d_.J + j);
  }
  long row_terminal(std::size_t j) const {
    return static_cast<long>(static_cast<std::size_t>(d_.H - 1) * 2 * d_.J + j);
  }
  long row_ctrl(int t, std::size_t j) const {
    return static_cast<long>(static_cast<std::size_t>(d_.H) * 2 * d_.J +
                             static_cast<std::size_t>(t) * d_.J + j);
  }
  long row_defect(int s, std::size_t j) const {
    return static_cast<long>(static_cast<std::size_t>(d_.H) * 2 * d_.J + d_.nu +
                             static_cast<std::size_t>(s) * 2 * d_.J + j);
  }

  const TrajOptProblem& p_;
  Dims d_;
  AbaSolver<double> solver_;
  AbaSolver<Lin> lin_solver_;
  std::vector<double> sqw_, sqf_, sr_;
};

}  // namespace

QuadraticCost make_cost(std::size_t J, double q_pos, double q_vel, double r_ctrl, double qf_pos,
                        double qf_vel, std::vector<double> goal_q) {
  QuadraticCost c;
  c.q_pos.assign(J, q_pos);
  c.q_vel.assign(J, q_vel);
  c.r_ctrl.assign(J, r_ctrl);
  c.qf_pos.assign(J, qf_pos);
  c.qf_vel.assign(J, qf_vel);
  c.goal.q = std::move(goal_q);
  c.goal.qd.assign(J, 0.0);
  return c;
}

TrajOptResult solve(const TrajOptProblem& problem) {
  const std::size_t J = problem.model->actuated_joint_count();
  if (problem.cost.q_pos.size() != J || problem.torque_bounds.size() != J ||
      problem.start.q.size() != J)
    throw Error(Errc::DimensionMismatch, "problem dimensions do not match the model");
  GnmsSolver solver(problem);
  return solver.run();
}

Dataset collect_dataset(const RobotModel& model, const SimParams& params, int K,
                        const StateSampler& sampler, const TrajOptProblem& prototype,
                        std::uint64_t seed, int workers) {
  if (K < 1) throw Error(Errc::ConfigError, "K must be at least 1");
  const std::size_t J = model.actuated_joint_count();
  const int max_attempts = 3 * K;

  struct Attempt {
    bool done = false;
    bool converged = false;
    Trajectory traj;
    std::vector<double> goal;
  };
  std::vector<Attempt> attempts(static_cast<std::size_t>(max_attempts));

  auto run_attempt = [&](int a) {
    std::mt19937_64 rng(splitmix64(seed ^ (0x5851f42d4c957f2dull * static_cast<std::uint64_t>(a + 1))));
    TrajOptProblem prob = prototype;
    prob.model = &model;
    prob.params = params;
    prob.start.q.resize(J);
    prob.start.qd.assign(J, 0.0);
    std::vector<double> goal(J);
    for (std::size_t j = 0; j < J; ++j) {
      std::uniform_real_distribution<double> u(sampler.lo[j], sampler.hi[j]);
      prob.start.q[j] = u(rng);
      goal[j] = u(rng);
    }
    prob.cost.goal.q = goal;
    prob.cost.goal.qd.assign(J, 0.0);
    Attempt& out = attempts[static_cast<std::size_t>(a)];
    try {
      TrajOptResult res = solve(prob);
      out.converged = res.report.converged;
      out.traj = std::move(res.trajectory);
    } catch (const Error&) {
      out.converged = false;
    }
    out.goal = std::move(goal);
    out.done = true;
  };

  // Deterministic waves: attempts are indexed, workers share a bag; the
  // accepted set is the first K converged attempts by index.
  int launched = 0;
  int accepted = 0;
  while (accepted < K && launched < max_attempts) {
    const int wave = std::min(max_attempts - launched, std::max(K - accepted, 1));
    std::atomic<int> next{launched};
    const int wave_end = launched + wave;
    auto worker_fn = [&] {
      for (int a = next.fetch_add(1); a < wave_end; a = next.fetch_add(1)) run_attempt(a);
    };
    std::vector<std::thread> pool;
    const int nthreads = std::max(1, std::min(workers, wave));
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int w = 1; w < nthreads; ++w) pool.emplace_back(worker_fn);
    worker_fn();
    for (auto& th : pool) th.join();
    launched = wave_end;
    accepted = 0;
    for (int a = 0; a < launched; ++a)
      if (attempts[static_cast<std::size_t>(a)].converged) ++accepted;
  }

  Dataset ds;
  for (int a = 0; a < launched && static_cast<int>(ds.trajectories.size()) < K; ++a) {
    Attempt& at = attempts[static_cast<std::size_t>(a)];
    if (!at.converged) continue;
    ds.trajectories.push_back(std::move(at.traj));
    ds.goals.push_back(std::move(at.goal));
  }
  if (static_cast<int>(ds.trajectories.size()) < K)
    throw Error(Errc::InsufficientConvergence,
                "only " + std::to_string(ds.trajectories.size()) + " of " + std::to_string(K) +
                    " trajectories converged within " + std::to_string(max_attempts) + " attempts");
  return ds;
}

}  // namespace rigrad
