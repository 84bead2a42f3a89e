#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rigrad/errors.hpp"

namespace rigrad {

struct Link {
  std::string name;
  double mass = 0.0;                              // kg
  std::array<double, 3> com{0.0, 0.0, 0.0};       // m, link frame
  std::array<double, 3> inertia_diag{0.0, 0.0, 0.0};  // kg m^2 about the com (xx, yy, zz)
};

enum class JointKind { kRevolute, kFixed };

struct Joint {
  std::string name;
  JointKind kind = JointKind::kFixed;
  std::array<double, 3> axis{1.0, 0.0, 0.0};      // unit, child-link frame
  std::array<double, 3> origin_xyz{0.0, 0.0, 0.0};  // m, parent frame
  std::array<double, 3> origin_rpy{0.0, 0.0, 0.0};  // rad, extrinsic XYZ
  double damping = 0.0;                           // N m s / rad
  double effort_limit = 0.0;                      // N m (revolute only)
  std::optional<std::pair<double, double>> position_limits;  // rad
  int parent_link = -1;                           // chain indices
  int child_link = -1;
};

// Serial chain, base first.  joints[i] connects links[i] to links[i+1].
struct RobotModel {
  std::string name;
  std::vector<Link> links;
  std::vector<Joint> joints;

  std::size_t link_count() const { return links.size(); }
  std::size_t actuated_joint_count() const {
    std::size_t j = 0;
    for (const Joint& jt : joints)
      if (jt.kind == JointKind::kRevolute) ++j;
    return j;
  }
  // Indices (into joints) of the revolute joints, chain order.
  std::vector<int> actuated_joints() const {
    std::vector<int> idx;
    for (int i = 0; i < static_cast<int>(joints.size()); ++i)
      if (joints[static_cast<std::size_t>(i)].kind == JointKind::kRevolute) idx.push_back(i);
    return idx;
  }
  // Flat optimizable-parameter length: 3 + L + 2J + 3L.
  std::size_t param_size() const {
    return 3 + link_count() + 2 * actuated_joint_count() + 3 * link_count();
  }
};

// The flat optimizable parameter vector, generic over the scalar type so the
// same rollout code serves simulation (double) and differentiation.
// Flat order: [gravity(3) | masses(L) | damping(J) | force_pd(J) | inertias(3L)].
template <typename T>
struct SimParamsT {
  std::array<T, 3> gravity{};
  std::vector<T> masses;    // L
  std::vector<T> damping;   // J, actuated joints in chain order
  std::vector<T> force_pd;  // J, dimensionless torque scale
  std::vector<T> inertias;  // 3L, link-major (xx, yy, zz)
};
using SimParams = SimParamsT<double>;

struct UrdfParseResult {
  RobotModel model;
  std::vector<std::string> warnings;
};

// Parses the URDF subset: link{inertial{origin, mass, inertia}},
// joint{type, parent, child, origin, axis, dynamics, limit}.  Rejects
// branching chains and actuated joint types other than revolute.
UrdfParseResult parse_urdf(const std::string& text);

SimParams default_params(const RobotModel& model);

std::vector<double> flatten(const SimParams& params);
SimParams unflatten(const RobotModel& model, const std::vector<double>& flat);

// Human-readable name of flat parameter index i, e.g. "mass[link2]".
std::string param_name(const RobotModel& model, std::size_t i);
// Group label of flat index i: gravity | mass | damping | force_pd | inertia.
std::string param_group(const RobotModel& model, std::size_t i);

}  // namespace rigrad
