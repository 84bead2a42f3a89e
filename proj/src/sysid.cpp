#include "rigrad/sysid.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <thread>

#include <Eigen/Dense>

namespace rigrad {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct WindowGrid {
  std::size_t start_tick;
  std::size_t n_sub;   // simulation substeps in the window
  int substeps;        // per tick
};

WindowGrid window_grid(const SysIdWindow& window, const ObservedRollout& obs,
                       const StepSpec& step) {
  obs.validate();
  const double period = obs.sample_period();
  if (std::fabs(step.control_period() - period) > 1e-12)
    throw Error(Errc::ConfigError, "simulation control period " + std::to_string(step.control_period()) +
                                       " does not match the rollout sample period " +
                                       std::to_string(period));
  if (window.duration < 0.0)
    throw Error(Errc::ConfigError, "system-id window duration must not be negative");
  WindowGrid g;
  g.substeps = step.substeps;
  g.start_tick = window.start_index;
  // duration 0 is allowed: the data term is empty and only the regularizer
  // remains.
  g.n_sub = static_cast<std::size_t>(std::llround(window.duration / step.dt));
  const std::size_t have = obs.ticks() * static_cast<std::size_t>(g.substeps);
  const std::size_t need = g.start_tick * static_cast<std::size_t>(g.substeps) + g.n_sub;
  if (need > have)
    throw Error(Errc::LengthMismatch,
                "window [start tick " + std::to_string(g.start_tick) + ", duration " +
                    std::to_string(window.duration) + " s] exceeds the rollout of " +
                    std::to_string(obs.ticks()) + " ticks (" +
                    std::to_string(obs.ticks() * step.control_period()) + " s)");
  return g;
}

// Simulated window states at every substep, generic over the scalar type.
// visit(sub_index_in_window, q) is called for each of the n_sub steps.
template <typename T, typename Visit>
void simulate_window(AbaSolver<T>& solver, std::vector<T>& q, std::vector<T>& qd,
                     const ObservedRollout& obs, const WindowGrid& g, const StepSpec& step,
                     Visit&& visit) {
  std::size_t done = 0;
  std::size_t tick = g.start_tick;
  while (done < g.n_sub) {
    const std::size_t todo = std::min<std::size_t>(static_cast<std::size_t>(g.substeps), g.n_sub - done);
    StepSpec partial = step;
    partial.substeps = static_cast<int>(todo);
    step_tick(solver, q, qd, std::span<const double>(obs.u_cmd[tick]), partial,
              static_cast<long>(tick), [&](int s) { visit(done + static_cast<std::size_t>(s) + 1, q); });
    done += todo;
    ++tick;
  }
}

struct TapeResidual {
  Tape tape;
  AbaSolver<TapeVar> solver;
  const RobotModel* model;
  const SysIdWindow* window;
  const ObservedRollout* obs;
  const RegularizerSpec* reg;
  StepSpec step;
  WindowGrid grid;
  UpsampledTargets targets;

  TapeResidual(const RobotModel& m, const SysIdWindow& w, const ObservedRollout& o,
               const RegularizerSpec& r, const StepSpec& s)
      : solver(m), model(&m), window(&w), obs(&o), reg(&r), step(s),
        grid(window_grid(w, o, s)), targets(upsample_linear(o, s.dt)) {
    if (r.alpha.size() != m.param_size() || r.anchor.size() != m.param_size())
      throw Error(Errc::LengthMismatch, "regularizer length does not match the parameter vector");
  }

  // Records the residual at x; returns the scalar output, the stacked terms
  // and the parameter leaves.  false on divergence.
  bool record(std::span<const double> x, TapeVar* value, std::vector<TapeVar>* terms,
              std::vector<TapeVar>* leaves) {
    tape.rewind(0);
    const SimParams p = unflatten(*model, std::vector<double>(x.begin(), x.end()));
    SimParamsT<TapeVar> pv = record_params(tape, p);
    *leaves = flat_param_vars(pv);
    solver.set_params(pv);

    const std::size_t J = model->actuated_joint_count();
    const std::size_t base = grid.start_tick * static_cast<std::size_t>(grid.substeps);
    std::vector<TapeVar> q(J), qd(J);
    for (std::size_t j = 0; j < J; ++j) {
      q[j] = tape.input(obs->q_obs[grid.start_tick][j]);
      qd[j] = tape.input(obs->qd_obs[grid.start_tick][j]);
    }
    terms->clear();
    terms->reserve((grid.n_sub + 1) * J + leaves->size());
    // The window start state is observed directly; its data terms vanish but
    // stay in the stack so term counts match duration/dt + 1 samples.
    for (std::size_t j = 0; j < J; ++j) terms->push_back(q[j] - targets.q[base][j]);
    try {
      simulate_window(solver, q, qd, *obs, grid, step, [&](std::size_t i, const std::vector<TapeVar>& qs) {
        for (std::size_t j = 0; j < J; ++j) terms->push_back(qs[j] - targets.q[base + i][j]);
      });
    } catch (const DivergedError&) {
      return false;
    }
    for (std::size_t k = 0; k < leaves->size(); ++k)
      if (reg->alpha[k] != 0.0)
        terms->push_back(((*leaves)[k] - reg->anchor[k]) * std::sqrt(reg->alpha[k]));

    TapeVar sum = terms->front() * terms->front();
    for (std::size_t k = 1; k < terms->size(); ++k) sum = sum + (*terms)[k] * (*terms)[k];
    *value = sum;
    return true;
  }
};

LocalSolveResult to_local(const std::vector<double>& x, double value, bool flagged) {
  return LocalSolveResult{x, value, flagged};
}

}  // namespace

void ObservedRollout::validate() const {
  if (u_cmd.empty() || q_obs.empty()) throw Error(Errc::EmptyRollout, "rollout has no samples");
  if (q_obs.size() != u_cmd.size() + 1 || qd_obs.size() != q_obs.size() ||
      sample_times.size() != q_obs.size())
    throw Error(Errc::LengthMismatch, "rollout sample/tick counts are inconsistent");
}

RegularizerSpec RegularizerSpec::zero(const RobotModel& model, const SimParams& p_init) {
  RegularizerSpec r;
  r.alpha.assign(model.param_size(), 0.0);
  r.anchor = flatten(p_init);
  return r;
}

RegularizerSpec RegularizerSpec::scale_normalized(const RobotModel& model, const SimParams& p_init,
                                                  double scale) {
  RegularizerSpec r;
  r.anchor = flatten(p_init);
  r.alpha.resize(r.anchor.size());
  for (std::size_t i = 0; i < r.anchor.size(); ++i)
    r.alpha[i] = scale / std::max(r.anchor[i] * r.anchor[i], 1.0);
  return r;
}

UpsampledTargets upsample_linear(const ObservedRollout& obs, double dt) {
  obs.validate();
  const double period = obs.sample_period();
  const std::size_t m = static_cast<std::size_t>(std::llround(period / dt));
  if (m < 1 || std::fabs(static_cast<double>(m) * dt - period) > 1e-12)
    throw Error(Errc::ConfigError, "simulation step does not divide the 25 Hz sample period");
  const std::size_t J = obs.q_obs[0].size();
  UpsampledTargets out;
  out.dt = dt;
  out.q.resize(obs.ticks() * m + 1);
  for (std::size_t k = 0; k < obs.ticks(); ++k) {
    for (std::size_t r = 0; r < m; ++r) {
      std::vector<double>& row = out.q[k * m + r];
      row.resize(J);
      const double f = static_cast<double>(r) / static_cast<double>(m);
      for (std::size_t j = 0; j < J; ++j)
        row[j] = obs.q_obs[k][j] + f * (obs.q_obs[k + 1][j] - obs.q_obs[k][j]);
    }
  }
  out.q.back() = obs.q_obs.back();
  return out;
}

ResidualEval residual(const RobotModel& model, const SimParams& p, const SysIdWindow& window,
                      const ObservedRollout& obs, const RegularizerSpec& reg,
                      const StepSpec& step) {
  const WindowGrid g = window_grid(window, obs, step);
  if (reg.alpha.size() != model.param_size() || reg.anchor.size() != model.param_size())
    throw Error(Errc::LengthMismatch, "regularizer length does not match the parameter vector");
  const UpsampledTargets targets = upsample_linear(obs, step.dt);
  const std::size_t J = model.actuated_joint_count();
  const std::size_t base = g.start_tick * static_cast<std::size_t>(g.substeps);

  ResidualEval eval;
  eval.terms.reserve((g.n_sub + 1) * J + reg.alpha.size());
  AbaSolver<double> solver(model);
  solver.set_params(p);
  std::vector<double> q = obs.q_obs[g.start_tick];
  std::vector<double> qd = obs.qd_obs[g.start_tick];
  for (std::size_t j = 0; j < J; ++j) eval.terms.push_back(q[j] - targets.q[base][j]);
  try {
    simulate_window(solver, q, qd, obs, g, step, [&](std::size_t i, const std::vector<double>& qs) {
      for (std::size_t j = 0; j < J; ++j) eval.terms.push_back(qs[j] - targets.q[base + i][j]);
    });
  } catch (const DivergedError&) {
    eval.diverged = true;
    eval.terms.clear();
    return eval;  // value stays +inf
  }
  const std::vector<double> flat = flatten(p);
  for (std::size_t k = 0; k < flat.size(); ++k)
    if (reg.alpha[k] != 0.0) eval.terms.push_back((flat[k] - reg.anchor[k]) * std::sqrt(reg.alpha[k]));
  eval.value = 0.0;
  for (double t : eval.terms) eval.value += t * t;
  return eval;
}

// ---------------------------------------------------------------------------
// L-BFGS with strong-Wolfe line search.
// ---------------------------------------------------------------------------

namespace {

struct WolfeResult {
  double alpha = 0.0;
  double f = 0.0;
  bool ok = false;
};

// Nocedal-Wright bracket + zoom.  Infinite objective values are treated as
// "too far" and bracketed away.
WolfeResult wolfe_search(const ScalarObjective& fn, std::span<const double> x,
                         std::span<const double> d, double f0, double dphi0,
                         std::vector<double>& x_trial, std::vector<double>& g_trial, double c1,
                         double c2) {
  const std::size_t n = x.size();
  auto phi = [&](double a, double* dphi) {
    for (std::size_t i = 0; i < n; ++i) x_trial[i] = x[i] + a * d[i];
    const double f = fn(x_trial, g_trial);
    if (dphi) {
      *dphi = 0.0;
      for (std::size_t i = 0; i < n; ++i) *dphi += g_trial[i] * d[i];
    }
    return f;
  };

  auto zoom = [&](double lo, double flo, double hi) -> WolfeResult {
    for (int it = 0; it < 30; ++it) {
      const double a = 0.5 * (lo + hi);
      double dphi = 0.0;
      const double f = phi(a, &dphi);
      if (!std::isfinite(f) || f > f0 + c1 * a * dphi0 || f >= flo) {
        hi = a;
        continue;
      }
      if (std::fabs(dphi) <= -c2 * dphi0) return {a, f, true};
      if (dphi * (hi - lo) >= 0.0) hi = lo;
      lo = a;
      flo = f;
    }
    return lo > 0.0 ? WolfeResult{lo, flo, true} : WolfeResult{};
  };

  double a_prev = 0.0, f_prev = f0;
  double a = 1.0;
  for (int it = 0; it < 20; ++it) {
    double dphi = 0.0;
    const double f = phi(a, &dphi);
    if (!std::isfinite(f) || f > f0 + c1 * a * dphi0 || (it > 0 && f >= f_prev))
      return zoom(a_prev, f_prev, a);
    if (std::fabs(dphi) <= -c2 * dphi0) return {a, f, true};
    if (dphi >= 0.0) return zoom(a, f, a_prev);
    a_prev = a;
    f_prev = f;
    a *= 2.0;
  }
  return {};
}

}  // namespace

LbfgsReport lbfgs_minimize(const ScalarObjective& fn, std::vector<double>& x,
                           const LbfgsOptions& opts) {
  const std::size_t n = x.size();
  LbfgsReport report;
  std::vector<double> g(n), x_trial(n), g_trial(n);
  double f = fn(x, g);
  if (!std::isfinite(f))
    throw Error(Errc::ImmediateDivergence, "objective is not finite at the starting point");

  std::vector<std::vector<double>> S, Y;
  std::vector<double> rho;
  std::vector<double> d(n), q(n);

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    double gmax = 0.0;
    for (double gi : g) gmax = std::max(gmax, std::fabs(gi));
    if (gmax <= opts.grad_tol) {
      report.converged = true;
      break;
    }
    report.iterations = iter + 1;

    // Two-loop recursion.
    q = g;
    std::vector<double> alpha_mem(S.size());
    for (std::size_t i = S.size(); i-- > 0;) {
      double sq = 0.0;
      for (std::size_t k = 0; k < n; ++k) sq += S[i][k] * q[k];
      alpha_mem[i] = rho[i] * sq;
      for (std::size_t k = 0; k < n; ++k) q[k] -= alpha_mem[i] * Y[i][k];
    }
    double gamma = 1.0;
    if (!S.empty()) {
      double sy = 0.0, yy = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        sy += S.back()[k] * Y.back()[k];
        yy += Y.back()[k] * Y.back()[k];
      }
      if (yy > 0.0) gamma = sy / yy;
    }
    for (std::size_t k = 0; k < n; ++k) q[k] *= gamma;
    for (std::size_t i = 0; i < S.size(); ++i) {
      double yq = 0.0;
      for (std::size_t k = 0; k < n; ++k) yq += Y[i][k] * q[k];
      const double beta = rho[i] * yq;
      for (std::size_t k = 0; k < n; ++k) q[k] += S[i][k] * (alpha_mem[i] - beta);
    }
    double dphi0 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      d[k] = -q[k];
      dphi0 += d[k] * g[k];
    }
    if (dphi0 >= 0.0) {  // not a descent direction: restart from steepest
      S.clear();
      Y.clear();
      rho.clear();
      dphi0 = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        d[k] = -g[k];
        dphi0 -= g[k] * g[k];
      }
    }

    const WolfeResult w = wolfe_search(fn, x, d, f, dphi0, x_trial, g_trial, opts.c1, opts.c2);
    if (!w.ok || w.f >= f) {
      report.line_search_failed = true;
      break;
    }

    std::vector<double> s(n), y(n);
    for (std::size_t k = 0; k < n; ++k) {
      s[k] = w.alpha * d[k];
      x[k] += s[k];
    }
    // Gradient at the accepted point (g_trial holds it from the last eval at
    // alpha; re-evaluate to be safe against zoom bookkeeping).
    const double f_new = fn(x, g_trial);
    for (std::size_t k = 0; k < n; ++k) y[k] = g_trial[k] - g[k];
    double sy = 0.0, ss = 0.0, yy = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      sy += s[k] * y[k];
      ss += s[k] * s[k];
      yy += y[k] * y[k];
    }
    if (sy > 1e-12 * std::sqrt(ss * yy)) {
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > opts.memory) {
        S.erase(S.begin());
        Y.erase(Y.begin());
        rho.erase(rho.begin());
      }
    }
    g = g_trial;
    f = f_new;
    report.trace.push_back(f);
  }
  report.final_value = f;
  return report;
}

// ---------------------------------------------------------------------------
// Bounded Levenberg-Marquardt.
// ---------------------------------------------------------------------------

LmReport lm_minimize(const VectorResidualFn& fn, std::vector<double>& x,
                     std::span<const double> lo, std::span<const double> hi,
                     const LmOptions& opts) {
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] < lo[i] - 1e-12 || x[i] > hi[i] + 1e-12)
      throw Error(Errc::OutOfBounds, "starting point outside bounds at index " + std::to_string(i));

  LmReport report;
  std::vector<double> r;
  Eigen::MatrixXd J;
  fn(x, r, &J);
  double cost = 0.0;
  for (double t : r) cost += t * t;
  if (!std::isfinite(cost))
    throw Error(Errc::ImmediateDivergence, "residual is not finite at the starting point");

  double lambda = opts.lambda_init;
  std::vector<double> best_x = x;
  double best_cost = cost;

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    report.iterations = iter + 1;
    const long m = static_cast<long>(r.size());
    Eigen::Map<const Eigen::VectorXd> rv(r.data(), m);
    Eigen::MatrixXd JtJ = J.transpose() * J;
    Eigen::VectorXd Jtr = J.transpose() * rv;
    if (Jtr.lpNorm<Eigen::Infinity>() < 1e-14 * std::max(1.0, cost)) {
      report.converged = true;
      break;
    }

    bool accepted = false;
    while (lambda <= opts.lambda_max) {
      Eigen::MatrixXd Aug = JtJ;
      for (long i = 0; i < Aug.rows(); ++i)
        Aug(i, i) += lambda * std::max(JtJ(i, i), 1e-12);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(Aug);
      if (ldlt.info() != Eigen::Success) {
        lambda *= 10.0;  // singular normal equations: escalate
        continue;
      }
      Eigen::VectorXd delta = ldlt.solve(-Jtr);
      std::vector<double> x_trial(n);
      double step_inf = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        x_trial[i] = std::clamp(x[i] + delta[static_cast<long>(i)], lo[i], hi[i]);
        step_inf = std::max(step_inf, std::fabs(x_trial[i] - x[i]));
      }
      if (step_inf < opts.step_tol * std::max(1.0, std::fabs(x[0]))) {
        report.converged = true;  // pinned at bounds or at the optimum
        accepted = true;
        break;
      }
      std::vector<double> r_trial;
      fn(x_trial, r_trial, nullptr);
      double cost_trial = 0.0;
      for (double t : r_trial) cost_trial += t * t;
      if (std::isfinite(cost_trial) && cost_trial < cost) {
        x = std::move(x_trial);
        cost = cost_trial;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        report.trace.push_back(cost);
        break;
      }
      lambda *= 10.0;
    }
    if (report.converged) break;
    if (!accepted) {
      report.lambda_exhausted = true;  // return best-so-far, flagged
      break;
    }
    if (cost < best_cost) {
      best_cost = cost;
      best_x = x;
    }
    fn(x, r, &J);
  }

  if (cost > best_cost) {
    x = best_x;
    cost = best_cost;
  }
  report.final_cost = cost;
  return report;
}

// ---------------------------------------------------------------------------
// Identification wrappers.
// ---------------------------------------------------------------------------

std::pair<std::vector<double>, std::vector<double>> default_bounds(const RobotModel& model,
                                                                   const SimParams& p_init) {
  const std::vector<double> flat = flatten(p_init);
  std::vector<double> lo(flat.size()), hi(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const std::string group = param_group(model, i);
    if (group == "damping") {
      lo[i] = 0.0;
      hi[i] = 18.0;
    } else if (group == "force_pd") {
      lo[i] = -1.5;
      hi[i] = 1.5;
    } else {
      const double a = 0.8 * flat[i];
      const double b = 1.2 * flat[i];
      lo[i] = std::min(a, b);
      hi[i] = std::max(a, b);
    }
  }
  return {lo, hi};
}

SysIdResult optimize_unbounded(const RobotModel& model, const SimParams& p0,
                               const SysIdWindow& window, const ObservedRollout& obs,
                               const RegularizerSpec& reg, const SysIdBudget& budget,
                               const StepSpec& step) {
  TapeResidual tr(model, window, obs, reg, step);
  ScalarObjective fn = [&tr](std::span<const double> x, std::span<double> grad) {
    TapeVar value;
    std::vector<TapeVar> terms, leaves;
    if (!tr.record(x, &value, &terms, &leaves))
      return std::numeric_limits<double>::infinity();
    if (!grad.empty()) {
      const std::vector<double> g = tr.tape.gradient(value, leaves);
      std::copy(g.begin(), g.end(), grad.begin());
    }
    return value.value();
  };

  std::vector<double> x = flatten(p0);
  LbfgsOptions opts;
  opts.max_iterations = budget.max_iterations;
  LbfgsReport rep = lbfgs_minimize(fn, x, opts);

  SysIdResult out;
  out.params = unflatten(model, x);
  out.residual = rep.final_value;
  out.converged = rep.converged;
  out.flagged = rep.line_search_failed;
  out.iterations = rep.iterations;
  out.trace = rep.trace;
  return out;
}

SysIdResult optimize_bounded(const RobotModel& model, const SimParams& p0,
                             std::span<const double> lo, std::span<const double> hi,
                             const SysIdWindow& window, const ObservedRollout& obs,
                             const RegularizerSpec& reg, const SysIdBudget& budget,
                             const StepSpec& step) {
  TapeResidual tr(model, window, obs, reg, step);
  VectorResidualFn fn = [&tr](std::span<const double> x, std::vector<double>& r,
                              Eigen::MatrixXd* jac) {
    TapeVar value;
    std::vector<TapeVar> terms, leaves;
    if (!tr.record(x, &value, &terms, &leaves)) {
      r.assign(1, std::numeric_limits<double>::infinity());
      if (jac) jac->setZero(1, static_cast<long>(x.size()));
      return;
    }
    r.resize(terms.size());
    for (std::size_t k = 0; k < terms.size(); ++k) r[k] = terms[k].value();
    if (jac) {
      jac->resize(static_cast<long>(terms.size()), static_cast<long>(x.size()));
      // One reverse sweep per residual term over the shared recording.
      for (std::size_t k = 0; k < terms.size(); ++k) {
        const std::vector<double> row = tr.tape.gradient(terms[k], leaves);
        for (std::size_t c = 0; c < row.size(); ++c)
          (*jac)(static_cast<long>(k), static_cast<long>(c)) = row[c];
      }
    }
  };

  std::vector<double> x = flatten(p0);
  LmOptions opts;
  opts.max_iterations = budget.max_iterations;
  LmReport rep = lm_minimize(fn, x, lo, hi, opts);

  SysIdResult out;
  out.params = unflatten(model, x);
  out.residual = rep.final_cost;
  out.converged = rep.converged;
  out.flagged = rep.lambda_exhausted;
  out.iterations = rep.iterations;
  out.trace = rep.trace;
  return out;
}

// ---------------------------------------------------------------------------
// Parallel basin hopping.
// ---------------------------------------------------------------------------

BasinHopResult basin_hop_engine(const BasinHopProblem& p) {
  if (p.workers < 1) throw Error(Errc::ConfigError, "basin hopping needs at least one worker");
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  BasinHopResult result;
  result.traces.resize(static_cast<std::size_t>(p.workers));
  std::vector<std::vector<double>> best_x(static_cast<std::size_t>(p.workers));
  std::vector<bool> overran(static_cast<std::size_t>(p.workers), false);

  auto run_worker = [&](int w) {
    std::mt19937_64 rng(splitmix64(p.seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(w)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    WorkerTrace& trace = result.traces[static_cast<std::size_t>(w)];

    std::vector<double> x0 = p.center;
    if (w > 0) {
      for (std::size_t i = 0; i < x0.size(); ++i) {
        std::uniform_real_distribution<double> u(p.start_lo[i], p.start_hi[i]);
        x0[i] = u(rng);
      }
    }
    if (p.project) p.project(x0);

    std::vector<double> best;
    double best_value = std::numeric_limits<double>::infinity();
    for (int round = 0; round < p.rounds; ++round) {
      if (round > 0) {
        if (p.wall_clock_s > 0.0 && elapsed() > p.wall_clock_s) {
          overran[static_cast<std::size_t>(w)] = true;
          break;
        }
        x0 = best;
        for (std::size_t i = 0; i < x0.size(); ++i) x0[i] += p.hop_scale[i] * gauss(rng);
        if (p.project) p.project(x0);
      }
      LocalSolveResult local = p.local_solve(x0, w);
      trace.round_values.push_back(local.value);
      if (local.value < best_value) {
        best_value = local.value;
        best = std::move(local.x);
      }
    }
    trace.best_value = best_value;
    best_x[static_cast<std::size_t>(w)] = std::move(best);
  };

  std::vector<std::thread> pool;
  for (int w = 1; w < p.workers; ++w) pool.emplace_back(run_worker, w);
  run_worker(0);
  for (auto& th : pool) th.join();

  for (int w = 0; w < p.workers; ++w) {
    if (result.traces[static_cast<std::size_t>(w)].best_value < result.value) {
      result.value = result.traces[static_cast<std::size_t>(w)].best_value;
      result.best_worker = w;
      result.x = best_x[static_cast<std::size_t>(w)];
    }
    if (overran[static_cast<std::size_t>(w)]) result.wall_clock_exceeded = true;
  }
  return result;
}

std::size_t estimate_tape_bytes(const RobotModel& model, const SysIdWindow& window,
                                const StepSpec& step) {
  Tape probe;
  AbaSolver<TapeVar> solver(model);
  SimParams p = default_params(model);
  solver.set_params(record_params(probe, p));
  const std::size_t J = model.actuated_joint_count();
  std::vector<TapeVar> q(J), qd(J), qdd(J);
  for (std::size_t j = 0; j < J; ++j) {
    q[j] = probe.input(0.1);
    qd[j] = probe.input(0.0);
  }
  const std::size_t before = probe.size();
  std::vector<double> tau(J, 0.0);
  solver.forward_dynamics(std::span<const TapeVar>(q), std::span<const TapeVar>(qd),
                          std::span<const double>(tau), std::span<TapeVar>(qdd));
  const std::size_t per_substep = probe.size() - before + 4 * J;  // + integration nodes
  const std::size_t substeps = static_cast<std::size_t>(std::llround(window.duration / step.dt));
  // 32-byte nodes plus the adjoint scratch.
  return per_substep * substeps * 40;
}

SysIdBasinResult basin_hop(const RobotModel& model, const SimParams& p_center,
                           const SysIdWindow& window, const ObservedRollout& obs,
                           const RegularizerSpec& reg, const BasinHopSpec& spec,
                           const StepSpec& step) {
  const std::size_t per_worker = estimate_tape_bytes(model, window, step);
  if (static_cast<double>(per_worker) * spec.workers > spec.ram_budget_bytes)
    throw Error(Errc::RamBudgetExceeded,
                std::to_string(spec.workers) + " workers need about " +
                    std::to_string(per_worker * static_cast<std::size_t>(spec.workers) >> 20) +
                    " MiB of tape, over the configured budget; reduce workers or the window");

  auto [blo, bhi] = default_bounds(model, p_center);
  const std::vector<double> center = flatten(p_center);

  BasinHopProblem prob;
  prob.center = center;
  prob.workers = spec.workers;
  prob.rounds = spec.rounds;
  prob.wall_clock_s = spec.wall_clock_s;
  prob.seed = spec.seed;
  prob.start_lo = blo;
  prob.start_hi = bhi;
  prob.hop_scale.resize(center.size());
  for (std::size_t i = 0; i < center.size(); ++i)
    prob.hop_scale[i] = spec.hop_rel * std::max(std::fabs(center[i]), 0.1);
  if (spec.solver == SysIdSolver::kBounded)
    prob.project = [lo = blo, hi = bhi](std::vector<double>& x) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], lo[i], hi[i]);
    };

  prob.local_solve = [&](std::span<const double> x0, int) {
    const SimParams p0 = unflatten(model, std::vector<double>(x0.begin(), x0.end()));
    try {
      SysIdResult r = spec.solver == SysIdSolver::kUnbounded
                          ? optimize_unbounded(model, p0, window, obs, reg, spec.local_budget, step)
                          : optimize_bounded(model, p0, blo, bhi, window, obs, reg,
                                             spec.local_budget, step);
      return to_local(flatten(r.params), r.residual, r.flagged);
    } catch (const Error&) {
      // Divergent start: report as infinitely bad so hopping routes around it.
      return to_local(std::vector<double>(x0.begin(), x0.end()),
                      std::numeric_limits<double>::infinity(), true);
    }
  };

  BasinHopResult res = basin_hop_engine(prob);
  SysIdBasinResult out;
  out.params = res.x.empty() ? p_center : unflatten(model, res.x);
  out.residual = res.value;
  out.wall_clock_exceeded = res.wall_clock_exceeded;
  out.traces = std::move(res.traces);
  return out;
}

}  // namespace rigrad
