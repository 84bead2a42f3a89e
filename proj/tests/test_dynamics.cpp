#include "rigrad/dynamics.hpp"

#include <random>

#include <Eigen/Dense>

#include "doctest.h"
#include "test_util.hpp"

using namespace rigrad;
using rigrad::test::central_diff;
using rigrad::test::fixture_path;
using rigrad::test::read_file;
using rigrad::test::rel_err;

namespace {

RobotModel load_model(const std::string& name) { return parse_urdf(read_file(fixture_path(name))).model; }

// Independent equations-of-motion oracle for the planar 2R arm fixture
// (z-axis joints, link length a1 = 1, coms at lc = 0.5 along x), derived
// symbolically from the Lagrangian: M(q) qdd + C(q, qd) + G(q) = tau_applied.
std::array<double, 2> two_link_lagrangian_qdd(const SimParams& p, const std::array<double, 2>& q,
                                              const std::array<double, 2>& qd,
                                              const std::array<double, 2>& tau_cmd) {
  const double a1 = 1.0, lc1 = 0.5, lc2 = 0.5;
  const double m1 = p.masses[1], m2 = p.masses[2];
  const double I1 = p.inertias[3 * 1 + 2], I2 = p.inertias[3 * 2 + 2];
  const double gx = p.gravity[0], gy = p.gravity[1];
  const double c1 = std::cos(q[0]), s1 = std::sin(q[0]);
  const double c2 = std::cos(q[1]), s2 = std::sin(q[1]);
  const double c12 = std::cos(q[0] + q[1]), s12 = std::sin(q[0] + q[1]);

  const double M11 = I1 + I2 + m1 * lc1 * lc1 + m2 * (a1 * a1 + lc2 * lc2 + 2 * a1 * lc2 * c2);
  const double M12 = I2 + m2 * (lc2 * lc2 + a1 * lc2 * c2);
  const double M22 = I2 + m2 * lc2 * lc2;

  const double h = m2 * a1 * lc2 * s2;
  const double C1 = -h * qd[1] * (2 * qd[0] + qd[1]);
  const double C2 = h * qd[0] * qd[0];

  const double G1 = -m1 * lc1 * (-gx * s1 + gy * c1) -
                    m2 * (a1 * (-gx * s1 + gy * c1) + lc2 * (-gx * s12 + gy * c12));
  const double G2 = -m2 * lc2 * (-gx * s12 + gy * c12);

  const double t1 = p.force_pd[0] * tau_cmd[0] - p.damping[0] * qd[0] - C1 - G1;
  const double t2 = p.force_pd[1] * tau_cmd[1] - p.damping[1] * qd[1] - C2 - G2;
  const double det = M11 * M22 - M12 * M12;
  return {(M22 * t1 - M12 * t2) / det, (M11 * t2 - M12 * t1) / det};
}

}  // namespace

TEST_CASE("pendulum hanging straight down is in equilibrium") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  JointState s{{M_PI}, {0.0}};
  std::vector<double> tau{0.0};
  auto qdd = forward_dynamics(model, p, s, tau);
  CHECK(std::fabs(qdd[0]) < 1e-12);

  // Off equilibrium the point-mass pendulum obeys qdd = (g/L) sin q.
  s.q[0] = M_PI / 2;
  qdd = forward_dynamics(model, p, s, tau);
  CHECK(qdd[0] == doctest::Approx(9.81).epsilon(1e-12));
}

TEST_CASE("commanded torque is scaled by force_pd against the pivot inertia") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  p.gravity = {0.0, 0.0, 0.0};
  p.damping[0] = 0.0;
  p.force_pd[0] = 2.0;
  JointState s{{0.7}, {0.0}};
  std::vector<double> tau{1.0};
  auto qdd = forward_dynamics(model, p, s, tau);
  CHECK(qdd[0] == doctest::Approx(2.0).epsilon(1e-12));  // I_pivot = m L^2 = 1
}

TEST_CASE("ABA matches the 2-link Lagrangian oracle on random draws") {
  RobotModel model = load_model("two_link.urdf");
  std::mt19937 rng(42);
  std::uniform_real_distribution<double> uq(-M_PI, M_PI), uqd(-3, 3), ut(-10, 10);
  std::uniform_real_distribution<double> um(0.5, 2.0), ui(0.01, 0.1), ug(-12, 12);
  std::uniform_real_distribution<double> ud(0.0, 2.0), up(0.5, 1.5);

  for (int trial = 0; trial < 300; ++trial) {
    SimParams p = default_params(model);
    p.masses[1] = um(rng);
    p.masses[2] = um(rng);
    p.inertias[3 * 1 + 2] = ui(rng);
    p.inertias[3 * 2 + 2] = ui(rng);
    // In-plane gravity exercises the G terms; the z component must not
    // matter for z-axis joints.
    p.gravity = {ug(rng), ug(rng), ug(rng)};
    p.damping = {ud(rng), ud(rng)};
    p.force_pd = {up(rng), up(rng)};

    JointState s{{uq(rng), uq(rng)}, {uqd(rng), uqd(rng)}};
    std::array<double, 2> tau{ut(rng), ut(rng)};
    std::vector<double> tau_v{tau[0], tau[1]};

    auto qdd = forward_dynamics(model, p, s, tau_v);
    auto expect = two_link_lagrangian_qdd(p, {s.q[0], s.q[1]}, {s.qd[0], s.qd[1]}, tau);
    CAPTURE(trial);
    CHECK(std::fabs(qdd[0] - expect[0]) < 1e-8);
    CHECK(std::fabs(qdd[1] - expect[1]) < 1e-8);
  }
}

TEST_CASE("free coasting advances position by exactly qd*dt") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  p.gravity = {0, 0, 0};
  p.damping[0] = 0.0;
  JointState s{{0.0}, {1.0}};
  std::vector<double> tau{0.0};
  JointState out = step(model, p, s, tau, StepSpec{0.01, 1});
  CHECK(out.q[0] == 0.01);
  CHECK(out.qd[0] == 1.0);
}

TEST_CASE("undamped pendulum conserves energy to 1% over one second") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  p.damping[0] = 0.0;
  AbaSolver<double> solver(model);
  solver.set_params(p);
  std::vector<double> q{2.0}, qd{0.0}, tau{0.0};
  auto energy = [&] { return 0.5 * qd[0] * qd[0] + 9.81 * std::cos(q[0]); };
  const double e0 = energy();
  StepSpec spec{1e-3, 25};  // 25 substeps per tick at 1 kHz
  double max_drift = 0.0;
  for (int tick = 0; tick < 40; ++tick) {
    step_tick(solver, q, qd, std::span<const double>(tau), spec, tick);
    max_drift = std::max(max_drift, std::fabs(energy() - e0));
  }
  CHECK(max_drift < 0.01 * 9.81);
}

TEST_CASE("runaway torque raises Diverged instead of returning NaN") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  JointState init{{0.0}, {0.0}};
  std::vector<std::vector<double>> controls(50, std::vector<double>{1e9});
  try {
    rollout(model, p, init, controls, StepSpec{1e-3, 40});
    FAIL("expected DivergedError");
  } catch (const DivergedError& e) {
    CHECK(e.tick() >= 0);
    CHECK(e.tick() < 50);
  }
}

TEST_CASE("rollout counting and determinism") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  JointState init{{M_PI}, {0.0}};
  // 8 s at 25 Hz -> 200 ticks -> 201 states.
  std::vector<std::vector<double>> controls(200, std::vector<double>{0.05});
  Trajectory t1 = rollout(model, p, init, controls, StepSpec{1e-3, 40});
  CHECK(t1.X.size() == 201);
  CHECK(t1.U.size() == 200);
  CHECK(t1.times.back() == doctest::Approx(8.0));

  Trajectory t2 = rollout(model, p, init, controls, StepSpec{1e-3, 40});
  for (std::size_t i = 0; i < t1.X.size(); ++i) {
    CHECK(t1.X[i].q[0] == t2.X[i].q[0]);
    CHECK(t1.X[i].qd[0] == t2.X[i].qd[0]);
  }
}

TEST_CASE("reverse-mode rollout gradient matches finite differences") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p0 = default_params(model);
  const StepSpec spec{1e-3, 40};
  const int ticks = 5;  // 0.2 s
  std::vector<std::vector<double>> controls;
  for (int t = 0; t < ticks; ++t) controls.push_back({0.8 * std::sin(0.9 * t)});
  const JointState init{{M_PI - 0.4}, {0.0}};

  auto final_q = [&](std::span<const double> flat) {
    SimParams p = unflatten(model, std::vector<double>(flat.begin(), flat.end()));
    Trajectory tr = rollout(model, p, init, controls, spec);
    return tr.X.back().q[0];
  };

  Tape tape;
  SimParamsT<TapeVar> p_vars = record_params(tape, p0);
  AbaSolver<TapeVar> solver(model);
  solver.set_params(p_vars);
  std::vector<TapeVar> q{record(tape, init.q[0])};
  std::vector<TapeVar> qd{record(tape, init.qd[0])};
  for (int t = 0; t < ticks; ++t)
    step_tick(solver, q, qd, std::span<const double>(controls[static_cast<std::size_t>(t)]), spec, t);
  auto inputs = flat_param_vars(p_vars);
  auto g = tape.gradient(q[0], inputs);

  auto g_fd = central_diff(final_q, flatten(p0), 1e-6);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CAPTURE(param_name(model, i));
    CHECK(rel_err(g[i], g_fd[i], 1e-6) < 1e-4);
  }
}

TEST_CASE("forward kinematics of the planar arm") {
  RobotModel model = load_model("two_link.urdf");
  std::vector<double> q{0.0, 0.0};
  Vec3d tip = forward_kinematics(model, q);
  CHECK(tip.x == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(std::fabs(tip.y) < 1e-12);
  CHECK(std::fabs(tip.z) < 1e-12);

  q = {M_PI / 2, 0.0};
  tip = forward_kinematics(model, q);
  CHECK(std::fabs(tip.x) < 1e-12);
  CHECK(tip.y == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("desk arm FK at the candle pose matches a homogeneous-transform oracle") {
  RobotModel model = load_model("desk_arm.urdf");
  const std::vector<double> candle{0.0, 3.14, 3.14, 0.0, 0.0, 0.0};

  // Independent oracle: chain of 4x4 homogeneous transforms via Eigen.
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
  std::size_t j = 0;
  for (const Joint& jt : model.joints) {
    Eigen::Matrix4d step = Eigen::Matrix4d::Identity();
    step.block<3, 1>(0, 3) = Eigen::Vector3d(jt.origin_xyz[0], jt.origin_xyz[1], jt.origin_xyz[2]);
    Eigen::Matrix3d rot = (Eigen::AngleAxisd(jt.origin_rpy[2], Eigen::Vector3d::UnitZ()) *
                           Eigen::AngleAxisd(jt.origin_rpy[1], Eigen::Vector3d::UnitY()) *
                           Eigen::AngleAxisd(jt.origin_rpy[0], Eigen::Vector3d::UnitX()))
                              .toRotationMatrix();
    if (jt.kind == JointKind::kRevolute) {
      rot = rot * Eigen::AngleAxisd(candle[j], Eigen::Vector3d(jt.axis[0], jt.axis[1], jt.axis[2]))
                      .toRotationMatrix();
      ++j;
    }
    step.block<3, 3>(0, 0) = rot;
    T = T * step;
  }

  Vec3d tip = forward_kinematics(model, candle);
  CHECK(std::fabs(tip.x - T(0, 3)) < 1e-10);
  CHECK(std::fabs(tip.y - T(1, 3)) < 1e-10);
  CHECK(std::fabs(tip.z - T(2, 3)) < 1e-10);
}

TEST_CASE("plain, dual and tape scalars produce identical dynamics values") {
  RobotModel model = load_model("desk_arm.urdf");
  SimParams p = default_params(model);
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> q(6), qd(6), tau(6);
  for (int i = 0; i < 6; ++i) {
    q[static_cast<std::size_t>(i)] = M_PI * u(rng);
    qd[static_cast<std::size_t>(i)] = 2 * u(rng);
    tau[static_cast<std::size_t>(i)] = 5 * u(rng);
  }

  auto qdd_d = forward_dynamics(model, p, JointState{q, qd}, tau);

  AbaSolver<DualScalar> solver_dual(model);
  solver_dual.set_params(lift_params<DualScalar>(p));
  std::vector<DualScalar> qD(q.begin(), q.end()), qdD(qd.begin(), qd.end()),
      tauD(tau.begin(), tau.end()), qddD(6);
  solver_dual.forward_dynamics(std::span<const DualScalar>(qD), std::span<const DualScalar>(qdD),
                               std::span<const DualScalar>(tauD), std::span<DualScalar>(qddD));

  Tape tape;
  AbaSolver<TapeVar> solver_tape(model);
  solver_tape.set_params(record_params(tape, p));
  std::vector<TapeVar> qT, qdT, qddT(6);
  for (double v : q) qT.push_back(record(tape, v));
  for (double v : qd) qdT.push_back(record(tape, v));
  solver_tape.forward_dynamics(std::span<const TapeVar>(qT), std::span<const TapeVar>(qdT),
                               std::span<const double>(tau), std::span<TapeVar>(qddT));

  for (int i = 0; i < 6; ++i) {
    CHECK(rel_err(qdd_d[static_cast<std::size_t>(i)], qddD[static_cast<std::size_t>(i)].value) < 1e-12);
    CHECK(rel_err(qdd_d[static_cast<std::size_t>(i)], qddT[static_cast<std::size_t>(i)].value()) < 1e-12);
  }
}

TEST_CASE("doubling mass and inertia halves acceleration for the same torque") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  p.gravity = {0, 0, 0};
  p.damping[0] = 0.0;
  JointState s{{0.3}, {0.0}};
  std::vector<double> tau{2.5};
  auto qdd1 = forward_dynamics(model, p, s, tau);
  SimParams p2 = p;
  for (double& m : p2.masses) m *= 2.0;
  for (double& in : p2.inertias) in *= 2.0;
  auto qdd2 = forward_dynamics(model, p2, s, tau);
  CHECK(qdd2[0] == doctest::Approx(qdd1[0] / 2.0).epsilon(1e-14));
}

TEST_CASE("damping dissipates kinetic energy") {
  RobotModel model = load_model("pendulum.urdf");
  SimParams p = default_params(model);
  p.gravity = {0, 0, 0};
  p.damping[0] = 1.5;
  AbaSolver<double> solver(model);
  solver.set_params(p);
  std::vector<double> q{0.0}, qd{4.0}, tau{0.0};
  double prev = std::fabs(qd[0]);
  for (int tick = 0; tick < 25; ++tick) {
    step_tick(solver, q, qd, std::span<const double>(tau), StepSpec{1e-3, 40}, tick);
    CHECK(std::fabs(qd[0]) <= prev + 1e-15);
    prev = std::fabs(qd[0]);
  }
  CHECK(prev < 4.0);
}
