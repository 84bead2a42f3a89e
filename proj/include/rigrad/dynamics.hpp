#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rigrad/autodiff.hpp"
#include "rigrad/errors.hpp"
#include "rigrad/model.hpp"
#include "rigrad/spatial.hpp"

namespace rigrad {

struct JointState {
  std::vector<double> q;   // rad
  std::vector<double> qd;  // rad/s
};

// Integrator resolution: dt * substeps is one control period (1/25 s when
// driving the rig at its 25 Hz sample rate).
struct StepSpec {
  double dt = 1e-3;   // s
  int substeps = 40;  // per control tick
  double control_period() const { return dt * substeps; }
};

// Time-stamped state/control sequence at control-tick resolution.
// |X| == |U| + 1.
struct Trajectory {
  std::vector<double> times;              // s
  std::vector<JointState> X;              // states at tick boundaries
  std::vector<std::vector<double>> U;     // commanded torque per tick, N m
};

inline constexpr double kDivergenceLimit = 1e6;

namespace detail {

struct JointConst {
  bool revolute = false;
  int actuated_index = -1;  // index into damping/force_pd when revolute
  Vec3d r;                  // child origin in parent frame
  Mat3d Ec;                 // parent->child rotation at q = 0
  Vec3d axis;               // child frame
  // E(q) = cos(q)*rotA + sin(q)*rotB + rotC (parent->child).
  Mat3d rotA, rotB, rotC;
};

struct LinkConst {
  Vec3d com;
  Mat3d K;      // (c.c) I - c c^T  (inertia shift)
  Mat3d cskew;  // skew(com)
};

}  // namespace detail

// O(n) articulated-body forward dynamics over the serial chain, generic over
// the scalar so one implementation serves simulation and differentiation.
// The solver owns per-rollout workspace; construct once, call set_params,
// then evaluate repeatedly.
template <typename T>
class AbaSolver {
 public:
  explicit AbaSolver(const RobotModel& model) : model_(&model) {
    const std::size_t n = model.joints.size();
    joints_.resize(n);
    bodies_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const Joint& jt = model.joints[k];
      detail::JointConst& jc = joints_[k];
      jc.r = {jt.origin_xyz[0], jt.origin_xyz[1], jt.origin_xyz[2]};
      jc.Ec = transpose(rpy_rotation(jt.origin_rpy));
      jc.revolute = jt.kind == JointKind::kRevolute;
      if (jc.revolute) {
        jc.axis = {jt.axis[0], jt.axis[1], jt.axis[2]};
        const Mat3d aa = outer(jc.axis, jc.axis);
        Mat3d ident = mat3_identity();
        jc.rotA = (ident - aa) * jc.Ec;
        Mat3d neg_skew = skew(jc.axis);
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) neg_skew[i][j] = -neg_skew[i][j];
        jc.rotB = neg_skew * jc.Ec;
        jc.rotC = aa * jc.Ec;
      }
      const Link& body = model.links[k + 1];
      detail::LinkConst& lc = bodies_[k];
      lc.com = {body.com[0], body.com[1], body.com[2]};
      const double cc = dot(lc.com, lc.com);
      Mat3d K = outer(lc.com, lc.com);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) K[i][j] = (i == j ? cc : 0.0) - K[i][j];
      lc.K = K;
      lc.cskew = skew(lc.com);
    }
    int act = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (joints_[k].revolute) joints_[k].actuated_index = act++;
    J_ = static_cast<std::size_t>(act);

    E_.resize(n);
    v_.resize(n);
    cbias_.resize(n);
    Ia_.resize(n);
    pa_.resize(n);
    U_.resize(n);
    Dinv_.resize(n);
    u_.resize(n);
    acc_.resize(n);
    inertia_.resize(n);
  }

  const RobotModel& model() const { return *model_; }
  std::size_t dof() const { return J_; }

  // Fixes the parameter values for subsequent evaluations.  Spatial link
  // inertias are assembled here once rather than per substep.
  void set_params(const SimParamsT<T>& p) {
    zero_ = p.masses[0] * 0.0;
    gravity_ = {p.gravity[0], p.gravity[1], p.gravity[2]};
    damping_ = p.damping;
    force_pd_ = p.force_pd;
    for (std::size_t k = 0; k < joints_.size(); ++k) {
      const detail::LinkConst& lc = bodies_[k];
      const T& m = p.masses[k + 1];
      SpatialInertia<T>& in = inertia_[k];
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          in.A[i][j] = m * lc.K[i][j];
          in.B[i][j] = m * lc.cskew[i][j];
          in.D[i][j] = m * (i == j ? 1.0 : 0.0);
        }
      in.A[0][0] += p.inertias[3 * (k + 1) + 0];
      in.A[1][1] += p.inertias[3 * (k + 1) + 1];
      in.A[2][2] += p.inertias[3 * (k + 1) + 2];
    }
  }

  // Joint accelerations under applied torque
  // tau_applied = force_pd * tau_cmd - damping * qd, gravity from params.
  template <typename TauT>
  void forward_dynamics(std::span<const T> q, std::span<const T> qd,
                        std::span<const TauT> tau_cmd, std::span<T> qdd_out) {
    const std::size_t n = joints_.size();
    const Vec3<T> zero3{zero_, zero_, zero_};

    // Outward: velocities, bias terms, body inertias.
    for (std::size_t k = 0; k < n; ++k) {
      const detail::JointConst& jc = joints_[k];
      if (jc.revolute) {
        const std::size_t j = static_cast<std::size_t>(jc.actuated_index);
        using std::cos;
        using std::sin;
        const T c = cos(q[j]);
        const T s = sin(q[j]);
        for (int r = 0; r < 3; ++r)
          for (int cc = 0; cc < 3; ++cc)
            E_[k][r][cc] = c * jc.rotA[r][cc] + s * jc.rotB[r][cc] + jc.rotC[r][cc];
        const SpatialMotion<T> vp = k == 0 ? SpatialMotion<T>{zero3, zero3} : v_[k - 1];
        SpatialMotion<T> v = transform_motion(k, vp);
        const Vec3<T> sqd = jc.axis * qd[j];
        // c = v x (S qd) evaluated before adding the joint rate.
        v.ang = v.ang + sqd;
        cbias_[k] = {cross(v.ang, sqd), cross(v.lin, sqd)};
        v_[k] = v;
      } else {
        const SpatialMotion<T> vp = k == 0 ? SpatialMotion<T>{zero3, zero3} : v_[k - 1];
        v_[k] = transform_motion(k, vp);
        cbias_[k] = {zero3, zero3};
      }
      Ia_[k] = inertia_[k];
      pa_[k] = cross_force(v_[k], apply_inertia(Ia_[k], v_[k]));
    }

    // Inward: articulated inertias and bias forces.
    for (std::size_t kk = n; kk-- > 0;) {
      const detail::JointConst& jc = joints_[kk];
      if (jc.revolute) {
        const std::size_t j = static_cast<std::size_t>(jc.actuated_index);
        SpatialForce<T> U{Ia_[kk].A * jc.axis, transposed_mul(Ia_[kk].B, jc.axis)};
        const T D = dot(jc.axis, U.ang);
        if (scalar_value(D) < 1e-12)
          throw Error(Errc::SingularInertia,
                      "articulated inertia pivot " + std::to_string(scalar_value(D)) +
                          " at joint '" + model_->joints[kk].name + "'");
        U_[kk] = U;
        Dinv_[kk] = 1.0 / D;
        const T tau_app = force_pd_[j] * tau_cmd[j] - damping_[j] * qd[j];
        u_[kk] = tau_app - dot(jc.axis, pa_[kk].ang);
      }
      if (kk == 0) continue;
      SpatialInertia<T> Ip = Ia_[kk];
      SpatialForce<T> pp = pa_[kk];
      if (jc.revolute) {
        const SpatialForce<T>& U = U_[kk];
        const Vec3<T> ga = U.ang * Dinv_[kk];
        const Vec3<T> gl = U.lin * Dinv_[kk];
        Ip.A = Ip.A - outer_product(U.ang, ga);
        Ip.B = Ip.B - outer_product(U.ang, gl);
        Ip.D = Ip.D - outer_product(U.lin, gl);
        // The bias term uses the reduced inertia I^a = I^A - U D^-1 U^T.
        const T coef = u_[kk] * Dinv_[kk];
        const SpatialForce<T> bias = apply_inertia(Ip, cbias_[kk]);
        pp.ang = pp.ang + bias.ang + U.ang * coef;
        pp.lin = pp.lin + bias.lin + U.lin * coef;
      }
      const SpatialInertia<T> Ixf = transform_inertia(kk, Ip);
      const SpatialForce<T> pxf = transform_force(kk, pp);
      Ia_[kk - 1].A = Ia_[kk - 1].A + Ixf.A;
      Ia_[kk - 1].B = Ia_[kk - 1].B + Ixf.B;
      Ia_[kk - 1].D = Ia_[kk - 1].D + Ixf.D;
      pa_[kk - 1].ang = pa_[kk - 1].ang + pxf.ang;
      pa_[kk - 1].lin = pa_[kk - 1].lin + pxf.lin;
    }

    // Outward: accelerations.  The base "accelerates" at -g, which folds
    // gravity into every joint without explicit per-link forces.
    for (std::size_t k = 0; k < n; ++k) {
      const detail::JointConst& jc = joints_[k];
      const SpatialMotion<T> ap =
          k == 0 ? SpatialMotion<T>{zero3, -gravity_} : acc_[k - 1];
      SpatialMotion<T> a = transform_motion(k, ap);
      a.ang = a.ang + cbias_[k].ang;
      a.lin = a.lin + cbias_[k].lin;
      if (jc.revolute) {
        const std::size_t j = static_cast<std::size_t>(jc.actuated_index);
        const T qdd =
            (u_[k] - dot(U_[k].ang, a.ang) - dot(U_[k].lin, a.lin)) * Dinv_[k];
        a.ang = a.ang + jc.axis * qdd;
        qdd_out[j] = qdd;
      }
      acc_[k] = a;
    }
  }

 private:
  SpatialMotion<T> transform_motion(std::size_t k, const SpatialMotion<T>& m) const {
    const detail::JointConst& jc = joints_[k];
    const Vec3<T> shifted = m.lin - cross(jc.r, m.ang);
    if (jc.revolute) return {E_[k] * m.ang, E_[k] * shifted};
    return {jc.Ec * m.ang, jc.Ec * shifted};
  }
  SpatialForce<T> transform_force(std::size_t k, const SpatialForce<T>& f) const {
    const detail::JointConst& jc = joints_[k];
    Vec3<T> fl = jc.revolute ? transposed_mul(E_[k], f.lin) : transposed_mul(jc.Ec, f.lin);
    Vec3<T> n = jc.revolute ? transposed_mul(E_[k], f.ang) : transposed_mul(jc.Ec, f.ang);
    return {n + cross(jc.r, fl), fl};
  }
  SpatialInertia<T> transform_inertia(std::size_t k, const SpatialInertia<T>& in) const {
    const detail::JointConst& jc = joints_[k];
    Mat3<T> A, B, D;
    if (jc.revolute) {
      A = rotate_block(E_[k], in.A);
      B = rotate_block(E_[k], in.B);
      D = rotate_block(E_[k], in.D);
    } else {
      A = rotate_block(jc.Ec, in.A);
      B = rotate_block(jc.Ec, in.B);
      D = rotate_block(jc.Ec, in.D);
    }
    const Mat3<T> Br = mul_skew(B, jc.r);       // B' r~
    const Mat3<T> rD = skew_mul(jc.r, D);       // r~ D'
    SpatialInertia<T> out;
    out.B = B + rD;
    out.D = D;
    const Mat3<T> rDr = mul_skew(rD, jc.r);     // r~ D' r~
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        out.A[i][j] = A[i][j] - Br[i][j] - Br[j][i] - rDr[i][j];
    return out;
  }

  const RobotModel* model_;
  std::vector<detail::JointConst> joints_;
  std::vector<detail::LinkConst> bodies_;
  std::size_t J_ = 0;

  T zero_{};
  Vec3<T> gravity_;
  std::vector<T> damping_, force_pd_;
  std::vector<SpatialInertia<T>> inertia_;

  std::vector<Mat3<T>> E_;
  std::vector<SpatialMotion<T>> v_, cbias_, acc_;
  std::vector<SpatialInertia<T>> Ia_;
  std::vector<SpatialForce<T>> pa_;
  std::vector<SpatialForce<T>> U_;
  std::vector<T> Dinv_, u_;
};

template <typename A, typename B>
auto outer_product(const Vec3<A>& a, const Vec3<B>& b) -> Mat3<ScalarProduct<A, B>> {
  Mat3<ScalarProduct<A, B>> r;
  r[0] = {a.x * b.x, a.x * b.y, a.x * b.z};
  r[1] = {a.y * b.x, a.y * b.y, a.y * b.z};
  r[2] = {a.z * b.x, a.z * b.y, a.z * b.z};
  return r;
}

// ---------------------------------------------------------------------------
// Parameter lifting between scalar types.
// ---------------------------------------------------------------------------

// Any scalar constructible from double (DualScalar, double, DualN).
template <typename T>
SimParamsT<T> lift_params(const SimParams& p) {
  SimParamsT<T> out;
  for (int i = 0; i < 3; ++i) out.gravity[static_cast<std::size_t>(i)] = T(p.gravity[static_cast<std::size_t>(i)]);
  out.masses.assign(p.masses.begin(), p.masses.end());
  out.damping.assign(p.damping.begin(), p.damping.end());
  out.force_pd.assign(p.force_pd.begin(), p.force_pd.end());
  out.inertias.assign(p.inertias.begin(), p.inertias.end());
  return out;
}

// Records every parameter as a tape leaf, in flat order.
inline SimParamsT<TapeVar> record_params(Tape& tape, const SimParams& p) {
  SimParamsT<TapeVar> out;
  for (int i = 0; i < 3; ++i) out.gravity[static_cast<std::size_t>(i)] = record(tape, p.gravity[static_cast<std::size_t>(i)]);
  for (double m : p.masses) out.masses.push_back(record(tape, m));
  for (double d : p.damping) out.damping.push_back(record(tape, d));
  for (double f : p.force_pd) out.force_pd.push_back(record(tape, f));
  for (double in : p.inertias) out.inertias.push_back(record(tape, in));
  return out;
}

// The recorded leaves in flat order, for gradient queries.
inline std::vector<TapeVar> flat_param_vars(const SimParamsT<TapeVar>& p) {
  std::vector<TapeVar> v;
  v.insert(v.end(), p.gravity.begin(), p.gravity.end());
  v.insert(v.end(), p.masses.begin(), p.masses.end());
  v.insert(v.end(), p.damping.begin(), p.damping.end());
  v.insert(v.end(), p.force_pd.begin(), p.force_pd.end());
  v.insert(v.end(), p.inertias.begin(), p.inertias.end());
  return v;
}

// ---------------------------------------------------------------------------
// Integration.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void check_finite(std::span<const T> q, std::span<const T> qd, long tick) {
  for (const T& v : q) {
    const double x = scalar_value(v);
    if (!std::isfinite(x) || std::fabs(x) > kDivergenceLimit)
      throw DivergedError("joint position diverged at control tick " + std::to_string(tick), tick);
  }
  for (const T& v : qd) {
    const double x = scalar_value(v);
    if (!std::isfinite(x) || std::fabs(x) > kDivergenceLimit)
      throw DivergedError("joint velocity diverged at control tick " + std::to_string(tick), tick);
  }
}
}  // namespace detail

// One control tick of semi-implicit Euler with zero-order-held torque.
// `after_substep(i)` runs after substep i so callers can sample dense states.
template <typename T, typename TauT, typename F>
void step_tick(AbaSolver<T>& solver, std::vector<T>& q, std::vector<T>& qd,
               std::span<const TauT> tau_cmd, const StepSpec& spec, long tick, F&& after_substep) {
  const std::size_t J = q.size();
  std::vector<T> qdd(J);
  for (int s = 0; s < spec.substeps; ++s) {
    solver.forward_dynamics(std::span<const T>(q), std::span<const T>(qd), tau_cmd,
                            std::span<T>(qdd));
    for (std::size_t j = 0; j < J; ++j) {
      qd[j] = qd[j] + qdd[j] * spec.dt;
      q[j] = q[j] + qd[j] * spec.dt;
    }
    detail::check_finite(std::span<const T>(q), std::span<const T>(qd), tick);
    after_substep(s);
  }
}

template <typename T, typename TauT>
void step_tick(AbaSolver<T>& solver, std::vector<T>& q, std::vector<T>& qd,
               std::span<const TauT> tau_cmd, const StepSpec& spec, long tick = -1) {
  step_tick(solver, q, qd, tau_cmd, spec, tick, [](int) {});
}

// Spec-level convenience entry points over plain doubles.

inline std::vector<double> forward_dynamics(const RobotModel& model, const SimParams& params,
                                            const JointState& state,
                                            std::span<const double> tau_cmd) {
  AbaSolver<double> solver(model);
  solver.set_params(params);
  std::vector<double> qdd(solver.dof());
  solver.forward_dynamics(std::span<const double>(state.q), std::span<const double>(state.qd),
                          tau_cmd, std::span<double>(qdd));
  return qdd;
}

inline JointState step(const RobotModel& model, const SimParams& params, const JointState& state,
                       std::span<const double> tau_cmd, const StepSpec& spec) {
  AbaSolver<double> solver(model);
  solver.set_params(params);
  JointState out = state;
  step_tick(solver, out.q, out.qd, tau_cmd, spec);
  return out;
}

inline Trajectory rollout(const RobotModel& model, const SimParams& params,
                          const JointState& initial,
                          std::span<const std::vector<double>> controls, const StepSpec& spec) {
  if (controls.empty()) throw Error(Errc::EmptyRollout, "rollout needs at least one control tick");
  AbaSolver<double> solver(model);
  solver.set_params(params);
  Trajectory traj;
  traj.X.push_back(initial);
  traj.times.push_back(0.0);
  std::vector<double> q = initial.q;
  std::vector<double> qd = initial.qd;
  for (std::size_t tick = 0; tick < controls.size(); ++tick) {
    step_tick(solver, q, qd, std::span<const double>(controls[tick]), spec,
              static_cast<long>(tick));
    traj.U.push_back(controls[tick]);
    traj.X.push_back(JointState{q, qd});
    traj.times.push_back(static_cast<double>(tick + 1) * spec.control_period());
  }
  return traj;
}

// World-frame position of the distal link origin.
inline Vec3d forward_kinematics(const RobotModel& model, std::span<const double> q) {
  Mat3d R = mat3_identity();
  Vec3d p{0.0, 0.0, 0.0};
  std::size_t j = 0;
  for (const Joint& jt : model.joints) {
    const Vec3d r{jt.origin_xyz[0], jt.origin_xyz[1], jt.origin_xyz[2]};
    p = p + R * r;
    R = R * rpy_rotation(jt.origin_rpy);
    if (jt.kind == JointKind::kRevolute) {
      R = R * axis_rotation({jt.axis[0], jt.axis[1], jt.axis[2]}, q[j]);
      ++j;
    }
  }
  return p;
}

}  // namespace rigrad
