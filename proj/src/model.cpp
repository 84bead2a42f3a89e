#include "rigrad/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

namespace rigrad {
namespace {

using boost::property_tree::ptree;

std::array<double, 3> parse_vec3(const std::string& s, const std::string& where) {
  std::istringstream is(s);
  std::array<double, 3> v{};
  for (int i = 0; i < 3; ++i) {
    if (!(is >> v[static_cast<std::size_t>(i)]))
      throw Error(Errc::ParseError, "expected 3 numbers in " + where + ", got '" + s + "'");
  }
  double extra;
  if (is >> extra) throw Error(Errc::ParseError, "expected 3 numbers in " + where + ", got '" + s + "'");
  return v;
}

double attr_num(const ptree& node, const std::string& attr, const std::string& where) {
  auto v = node.get_optional<std::string>("<xmlattr>." + attr);
  if (!v) throw Error(Errc::ParseError, "missing required attribute '" + attr + "' in " + where);
  try {
    return std::stod(*v);
  } catch (const std::exception&) {
    throw Error(Errc::ParseError, "attribute '" + attr + "' in " + where + " is not a number: '" + *v + "'");
  }
}

std::string attr_str(const ptree& node, const std::string& attr, const std::string& where) {
  auto v = node.get_optional<std::string>("<xmlattr>." + attr);
  if (!v) throw Error(Errc::ParseError, "missing required attribute '" + attr + "' in " + where);
  return *v;
}

Link parse_link(const ptree& node, std::vector<std::string>& warnings) {
  Link link;
  link.name = attr_str(node, "name", "link");
  auto inertial = node.get_child_optional("inertial");
  if (!inertial) return link;  // massless frame link

  if (auto origin = inertial->get_child_optional("origin")) {
    if (auto xyz = origin->get_optional<std::string>("<xmlattr>.xyz"))
      link.com = parse_vec3(*xyz, "inertial origin of link '" + link.name + "'");
    if (auto rpy = origin->get_optional<std::string>("<xmlattr>.rpy")) {
      auto r = parse_vec3(*rpy, "inertial origin of link '" + link.name + "'");
      if (std::fabs(r[0]) + std::fabs(r[1]) + std::fabs(r[2]) > 0.0)
        warnings.push_back("link '" + link.name + "': rotated inertial frame ignored");
    }
  }
  if (auto mass = inertial->get_child_optional("mass"))
    link.mass = attr_num(*mass, "value", "mass of link '" + link.name + "'");
  if (link.mass < 0.0)
    throw Error(Errc::ParseError, "link '" + link.name + "' has negative mass");

  if (auto inertia = inertial->get_child_optional("inertia")) {
    const std::string where = "inertia of link '" + link.name + "'";
    link.inertia_diag = {attr_num(*inertia, "ixx", where), attr_num(*inertia, "iyy", where),
                         attr_num(*inertia, "izz", where)};
    for (double d : link.inertia_diag)
      if (d < 0.0) throw Error(Errc::ParseError, where + " has a negative diagonal term");
    double off = 0.0;
    for (const char* a : {"ixy", "ixz", "iyz"})
      off += std::fabs(inertia->get<double>("<xmlattr>." + std::string(a), 0.0));
    if (off > 0.0)
      warnings.push_back("link '" + link.name + "': nonzero off-diagonal inertia terms dropped");
  }
  return link;
}

struct RawJoint {
  Joint joint;
  std::string parent_name;
  std::string child_name;
};

RawJoint parse_joint(const ptree& node) {
  RawJoint raw;
  Joint& j = raw.joint;
  j.name = attr_str(node, "name", "joint");
  const std::string type = attr_str(node, "type", "joint '" + j.name + "'");
  if (type == "revolute") {
    j.kind = JointKind::kRevolute;
  } else if (type == "fixed") {
    j.kind = JointKind::kFixed;
  } else {
    throw Error(Errc::UnsupportedStructure,
                "joint '" + j.name + "' has unsupported type '" + type + "' (revolute and fixed only)");
  }

  auto parent = node.get_child_optional("parent");
  auto child = node.get_child_optional("child");
  if (!parent || !child)
    throw Error(Errc::ParseError, "joint '" + j.name + "' is missing parent or child");
  raw.parent_name = attr_str(*parent, "link", "parent of joint '" + j.name + "'");
  raw.child_name = attr_str(*child, "link", "child of joint '" + j.name + "'");

  if (auto origin = node.get_child_optional("origin")) {
    if (auto xyz = origin->get_optional<std::string>("<xmlattr>.xyz"))
      j.origin_xyz = parse_vec3(*xyz, "origin of joint '" + j.name + "'");
    if (auto rpy = origin->get_optional<std::string>("<xmlattr>.rpy"))
      j.origin_rpy = parse_vec3(*rpy, "origin of joint '" + j.name + "'");
  }
  if (auto axis = node.get_child_optional("axis"))
    j.axis = parse_vec3(attr_str(*axis, "xyz", "axis of joint '" + j.name + "'"),
                        "axis of joint '" + j.name + "'");
  if (auto dyn = node.get_child_optional("dynamics"))
    j.damping = dyn->get<double>("<xmlattr>.damping", 0.0);
  if (j.damping < 0.0)
    throw Error(Errc::ParseError, "joint '" + j.name + "' has negative damping");

  if (j.kind == JointKind::kRevolute) {
    auto limit = node.get_child_optional("limit");
    if (!limit)
      throw Error(Errc::ParseError, "revolute joint '" + j.name + "' is missing its limit tag");
    j.effort_limit = attr_num(*limit, "effort", "limit of joint '" + j.name + "'");
    if (j.effort_limit <= 0.0)
      throw Error(Errc::ParseError, "revolute joint '" + j.name + "' needs a positive effort limit");
    auto lower = limit->get_optional<double>("<xmlattr>.lower");
    auto upper = limit->get_optional<double>("<xmlattr>.upper");
    if (lower && upper) j.position_limits = std::make_pair(*lower, *upper);

    const double norm = std::sqrt(j.axis[0] * j.axis[0] + j.axis[1] * j.axis[1] + j.axis[2] * j.axis[2]);
    if (std::fabs(norm - 1.0) > 1e-9)
      throw Error(Errc::ParseError, "axis of joint '" + j.name + "' is not unit length");
  }
  return raw;
}

}  // namespace

UrdfParseResult parse_urdf(const std::string& text) {
  ptree doc;
  try {
    std::istringstream is(text);
    boost::property_tree::read_xml(is, doc);
  } catch (const boost::property_tree::xml_parser_error& e) {
    throw Error(Errc::ParseError, std::string("malformed XML: ") + e.what());
  }

  auto robot = doc.get_child_optional("robot");
  if (!robot) throw Error(Errc::ParseError, "no <robot> root element");

  UrdfParseResult result;
  result.model.name = robot->get<std::string>("<xmlattr>.name", "");

  std::vector<Link> links;
  std::vector<RawJoint> joints;
  for (const auto& [tag, node] : *robot) {
    if (tag == "link") {
      links.push_back(parse_link(node, result.warnings));
    } else if (tag == "joint") {
      joints.push_back(parse_joint(node));
    } else if (tag == "<xmlattr>" || tag == "material") {
      // attributes / top-level materials: nothing to extract
    } else {
      result.warnings.push_back("unknown tag <" + tag + "> ignored");
    }
  }
  if (links.empty()) throw Error(Errc::ParseError, "URDF defines no links");

  std::map<std::string, int> by_name;
  for (int i = 0; i < static_cast<int>(links.size()); ++i) {
    const std::string& n = links[static_cast<std::size_t>(i)].name;
    if (!by_name.emplace(n, i).second)
      throw Error(Errc::ParseError, "duplicate link name '" + n + "'");
  }

  // Resolve the chain: exactly one root, at most one child joint per link.
  std::vector<int> child_joint(links.size(), -1);
  std::vector<bool> has_parent(links.size(), false);
  for (int ji = 0; ji < static_cast<int>(joints.size()); ++ji) {
    RawJoint& rj = joints[static_cast<std::size_t>(ji)];
    auto p = by_name.find(rj.parent_name);
    auto c = by_name.find(rj.child_name);
    if (p == by_name.end() || c == by_name.end())
      throw Error(Errc::ParseError, "joint '" + rj.joint.name + "' references an unknown link");
    if (child_joint[static_cast<std::size_t>(p->second)] != -1)
      throw Error(Errc::UnsupportedStructure,
                  "link '" + rj.parent_name + "' has more than one child joint (branching chain)");
    if (has_parent[static_cast<std::size_t>(c->second)])
      throw Error(Errc::UnsupportedStructure, "link '" + rj.child_name + "' has two parent joints");
    child_joint[static_cast<std::size_t>(p->second)] = ji;
    has_parent[static_cast<std::size_t>(c->second)] = true;
  }

  int root = -1;
  for (int i = 0; i < static_cast<int>(links.size()); ++i) {
    if (!has_parent[static_cast<std::size_t>(i)]) {
      if (root != -1)
        throw Error(Errc::UnsupportedStructure, "multiple root links: '" +
                                                    links[static_cast<std::size_t>(root)].name + "' and '" +
                                                    links[static_cast<std::size_t>(i)].name + "'");
      root = i;
    }
  }
  if (root == -1) throw Error(Errc::UnsupportedStructure, "kinematic loop: no root link");

  RobotModel& m = result.model;
  int cur = root;
  while (true) {
    m.links.push_back(links[static_cast<std::size_t>(cur)]);
    const int ji = child_joint[static_cast<std::size_t>(cur)];
    if (ji == -1) break;
    Joint j = joints[static_cast<std::size_t>(ji)].joint;
    j.parent_link = static_cast<int>(m.links.size()) - 1;
    j.child_link = j.parent_link + 1;
    m.joints.push_back(j);
    cur = by_name.at(joints[static_cast<std::size_t>(ji)].child_name);
  }
  if (m.links.size() != links.size())
    throw Error(Errc::UnsupportedStructure, "URDF contains links disconnected from the chain");
  return result;
}

SimParams default_params(const RobotModel& model) {
  SimParams p;
  p.gravity = {0.0, 0.0, -9.81};
  p.masses.reserve(model.links.size());
  p.inertias.reserve(3 * model.links.size());
  for (const Link& l : model.links) {
    p.masses.push_back(l.mass);
    p.inertias.push_back(l.inertia_diag[0]);
    p.inertias.push_back(l.inertia_diag[1]);
    p.inertias.push_back(l.inertia_diag[2]);
  }
  for (int ji : model.actuated_joints()) {
    p.damping.push_back(model.joints[static_cast<std::size_t>(ji)].damping);
    p.force_pd.push_back(1.0);
  }
  return p;
}

std::vector<double> flatten(const SimParams& params) {
  std::vector<double> flat;
  flat.reserve(3 + params.masses.size() + params.damping.size() + params.force_pd.size() +
               params.inertias.size());
  flat.insert(flat.end(), params.gravity.begin(), params.gravity.end());
  flat.insert(flat.end(), params.masses.begin(), params.masses.end());
  flat.insert(flat.end(), params.damping.begin(), params.damping.end());
  flat.insert(flat.end(), params.force_pd.begin(), params.force_pd.end());
  flat.insert(flat.end(), params.inertias.begin(), params.inertias.end());
  return flat;
}

SimParams unflatten(const RobotModel& model, const std::vector<double>& flat) {
  const std::size_t L = model.link_count();
  const std::size_t J = model.actuated_joint_count();
  if (flat.size() != model.param_size())
    throw Error(Errc::LengthMismatch, "parameter vector has length " + std::to_string(flat.size()) +
                                          ", model needs " + std::to_string(model.param_size()));
  SimParams p;
  std::size_t k = 0;
  for (int i = 0; i < 3; ++i) p.gravity[static_cast<std::size_t>(i)] = flat[k++];
  p.masses.assign(flat.begin() + static_cast<long>(k), flat.begin() + static_cast<long>(k + L));
  k += L;
  p.damping.assign(flat.begin() + static_cast<long>(k), flat.begin() + static_cast<long>(k + J));
  k += J;
  p.force_pd.assign(flat.begin() + static_cast<long>(k), flat.begin() + static_cast<long>(k + J));
  k += J;
  p.inertias.assign(flat.begin() + static_cast<long>(k), flat.begin() + static_cast<long>(k + 3 * L));
  return p;
}

std::string param_name(const RobotModel& model, std::size_t i) {
  const std::size_t L = model.link_count();
  const std::size_t J = model.actuated_joint_count();
  const auto act = model.actuated_joints();
  if (i < 3) return std::string("gravity.") + "xyz"[i];
  i -= 3;
  if (i < L) return "mass[" + model.links[i].name + "]";
  i -= L;
  if (i < J) return "damping[" + model.joints[static_cast<std::size_t>(act[i])].name + "]";
  i -= J;
  if (i < J) return "force_pd[" + model.joints[static_cast<std::size_t>(act[i])].name + "]";
  i -= J;
  const char* comp[] = {"xx", "yy", "zz"};
  return "inertia[" + model.links[i / 3].name + "]." + comp[i % 3];
}

std::string param_group(const RobotModel& model, std::size_t i) {
  const std::size_t L = model.link_count();
  const std::size_t J = model.actuated_joint_count();
  if (i < 3) return "gravity";
  if (i < 3 + L) return "mass";
  if (i < 3 + L + J) return "damping";
  if (i < 3 + L + 2 * J) return "force_pd";
  return "inertia";
}

}  // namespace rigrad
