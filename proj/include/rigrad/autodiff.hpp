#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rigrad/errors.hpp"

namespace rigrad {

// Divisors (and other singular denominators) smaller than this raise
// Errc::NumericDomain instead of producing inf, which would otherwise
// poison an entire reverse sweep.
inline constexpr double kDivGuard = 1e-12;

namespace detail {
inline void throw_domain(const char* what) { throw Error(Errc::NumericDomain, what); }
inline double guarded_inv(double x, const char* what) {
  if (std::fabs(x) < kDivGuard) throw_domain(what);
  return 1.0 / x;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Forward mode: value + directional derivative w.r.t. one seed.
// ---------------------------------------------------------------------------

struct DualScalar {
  double value = 0.0;
  double deriv = 0.0;

  DualScalar() = default;
  DualScalar(double v) : value(v), deriv(0.0) {}  // NOLINT: constants are passive
  DualScalar(double v, double d) : value(v), deriv(d) {}

  DualScalar& operator+=(const DualScalar& o) { value += o.value; deriv += o.deriv; return *this; }
  DualScalar& operator-=(const DualScalar& o) { value -= o.value; deriv -= o.deriv; return *this; }
  DualScalar& operator*=(const DualScalar& o) { *this = DualScalar(value * o.value, deriv * o.value + value * o.deriv); return *this; }
  DualScalar& operator/=(const DualScalar& o) {
    const double inv = detail::guarded_inv(o.value, "dual division by near-zero value");
    *this = DualScalar(value * inv, (deriv - value * inv * o.deriv) * inv);
    return *this;
  }
};

inline DualScalar operator-(const DualScalar& x) { return {-x.value, -x.deriv}; }
inline DualScalar operator+(const DualScalar& a, const DualScalar& b) { return {a.value + b.value, a.deriv + b.deriv}; }
inline DualScalar operator-(const DualScalar& a, const DualScalar& b) { return {a.value - b.value, a.deriv - b.deriv}; }
inline DualScalar operator*(const DualScalar& a, const DualScalar& b) { return {a.value * b.value, a.deriv * b.value + a.value * b.deriv}; }
inline DualScalar operator/(const DualScalar& a, const DualScalar& b) {
  const double inv = detail::guarded_inv(b.value, "dual division by near-zero value");
  return {a.value * inv, (a.deriv - a.value * inv * b.deriv) * inv};
}

inline bool operator<(const DualScalar& a, const DualScalar& b) { return a.value < b.value; }
inline bool operator>(const DualScalar& a, const DualScalar& b) { return a.value > b.value; }
inline bool operator<=(const DualScalar& a, const DualScalar& b) { return a.value <= b.value; }
inline bool operator>=(const DualScalar& a, const DualScalar& b) { return a.value >= b.value; }

inline DualScalar sin(const DualScalar& x) { return {std::sin(x.value), std::cos(x.value) * x.deriv}; }
inline DualScalar cos(const DualScalar& x) { return {std::cos(x.value), -std::sin(x.value) * x.deriv}; }
inline DualScalar tan(const DualScalar& x) {
  const double c = std::cos(x.value);
  const double inv = detail::guarded_inv(c * c, "tan near singularity");
  return {std::tan(x.value), inv * x.deriv};
}
inline DualScalar exp(const DualScalar& x) { const double e = std::exp(x.value); return {e, e * x.deriv}; }
inline DualScalar log(const DualScalar& x) {
  if (x.value <= 0.0) detail::throw_domain("log of non-positive value");
  return {std::log(x.value), x.deriv / x.value};
}
inline DualScalar sqrt(const DualScalar& x) {
  if (x.value < 0.0) detail::throw_domain("sqrt of negative value");
  const double r = std::sqrt(x.value);
  return {r, 0.5 * detail::guarded_inv(r, "sqrt derivative at zero") * x.deriv};
}
inline DualScalar pow(const DualScalar& x, double c) {
  if (x.value == 0.0 && c < 1.0) detail::throw_domain("pow with singular derivative at zero base");
  if (x.value < 0.0 && c != std::floor(c)) detail::throw_domain("pow of negative base with non-integer exponent");
  return {std::pow(x.value, c), c * std::pow(x.value, c - 1.0) * x.deriv};
}
inline DualScalar pow(const DualScalar& x, const DualScalar& y) {
  if (x.value <= 0.0) detail::throw_domain("pow of non-positive base with variable exponent");
  const double v = std::pow(x.value, y.value);
  return {v, v * (y.deriv * std::log(x.value) + y.value * x.deriv / x.value)};
}
// Subgradient convention: derivative flows to the selected argument, ties to
// the first.
inline DualScalar min(const DualScalar& a, const DualScalar& b) { return a.value <= b.value ? a : b; }
inline DualScalar max(const DualScalar& a, const DualScalar& b) { return a.value >= b.value ? a : b; }

// ---------------------------------------------------------------------------
// Reverse mode: recorded-operation tape.
// ---------------------------------------------------------------------------

enum class TapeOp : std::uint8_t {
  kLeaf, kAdd, kSub, kMul, kDiv, kNeg,
  kSin, kCos, kTan, kExp, kLog, kSqrt, kPow, kMin, kMax,
};

class Tape;

// Handle to one tape node.  Valid only against the tape that created it and
// only while its node is in the live region.
class TapeVar {
 public:
  TapeVar() = default;
  TapeVar(Tape* tape, std::int32_t index, double value) : tape_(tape), index_(index), value_(value) {}

  double value() const { return value_; }
  std::int32_t index() const { return index_; }
  Tape* tape() const { return tape_; }

  TapeVar& operator+=(const TapeVar& o);
  TapeVar& operator-=(const TapeVar& o);
  TapeVar& operator*=(const TapeVar& o);
  TapeVar& operator/=(const TapeVar& o);
  TapeVar& operator+=(double c);
  TapeVar& operator-=(double c);
  TapeVar& operator*=(double c);
  TapeVar& operator/=(double c);

 private:
  Tape* tape_ = nullptr;
  std::int32_t index_ = -1;
  double value_ = 0.0;
};

inline bool operator<(const TapeVar& a, const TapeVar& b) { return a.value() < b.value(); }
inline bool operator>(const TapeVar& a, const TapeVar& b) { return a.value() > b.value(); }
inline bool operator<=(const TapeVar& a, const TapeVar& b) { return a.value() <= b.value(); }
inline bool operator>=(const TapeVar& a, const TapeVar& b) { return a.value() >= b.value(); }

class Tape {
 public:
  static constexpr std::size_t kDefaultMaxNodes = std::size_t(1) << 27;

  explicit Tape(std::size_t max_nodes = kDefaultMaxNodes) : max_nodes_(max_nodes) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Records an input (leaf) variable.
  TapeVar input(double value) {
    const std::int32_t idx = push(TapeOp::kLeaf, -1, -1, 0.0, 0.0);
    return TapeVar(this, idx, value);
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t max_nodes() const { return max_nodes_; }
  std::size_t mark() const { return nodes_.size(); }

  void reserve(std::size_t n) { nodes_.reserve(std::min(n, max_nodes_)); }

  // Discards every node recorded after `mark`.  Variables created before the
  // mark stay valid; later ones become stale and are rejected on use.
  void rewind(std::size_t mark) {
    if (mark > nodes_.size())
      throw Error(Errc::InvalidMark, "rewind mark " + std::to_string(mark) +
                                         " beyond live region of " + std::to_string(nodes_.size()) + " nodes");
    nodes_.resize(mark);
  }
  void clear() { nodes_.clear(); }

  // d(output)/d(inputs[i]) in one reverse sweep.  Multiple sweeps over the
  // same recording are cheap: the adjoint buffer is left all-zero behind the
  // sweep, so nothing is re-cleared up front.
  std::vector<double> gradient(const TapeVar& output, std::span<const TapeVar> inputs) {
    check_owned(output);
    for (const TapeVar& v : inputs) check_owned(v);
    if (adjoint_.size() < nodes_.size()) adjoint_.resize(nodes_.size(), 0.0);

    std::vector<double> result(inputs.size(), 0.0);
    // Walk requested input indices in descending order alongside the sweep.
    std::vector<std::pair<std::int32_t, std::size_t>> pending;  // (node index, result slot)
    pending.reserve(inputs.size());
    for (std::size_t s = 0; s < inputs.size(); ++s)
      if (inputs[s].index() <= output.index()) pending.emplace_back(inputs[s].index(), s);
    std::sort(pending.begin(), pending.end(),
              [](const auto& l, const auto& r) { return l.first > r.first; });

    adjoint_[static_cast<std::size_t>(output.index())] = 1.0;
    std::size_t cursor = 0;
    for (std::int32_t i = output.index(); i >= 0; --i) {
      const double adj = adjoint_[static_cast<std::size_t>(i)];
      adjoint_[static_cast<std::size_t>(i)] = 0.0;
      while (cursor < pending.size() && pending[cursor].first == i) {
        result[pending[cursor].second] = adj;
        ++cursor;
      }
      if (adj == 0.0) continue;
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.a >= 0) adjoint_[static_cast<std::size_t>(n.a)] += n.pa * adj;
      if (n.b >= 0) adjoint_[static_cast<std::size_t>(n.b)] += n.pb * adj;
    }
    return result;
  }

  std::int32_t push(TapeOp op, std::int32_t a, std::int32_t b, double pa, double pb) {
    if (nodes_.size() >= max_nodes_)
      throw Error(Errc::TapeFull, "tape is full: max_nodes cap of " + std::to_string(max_nodes_) +
                                      " reached (configure autodiff.max_nodes)");
    nodes_.push_back(Node{a, b, pa, pb, op});
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  void check_owned(const TapeVar& v) const {
    if (v.tape() != this)
      throw Error(Errc::CrossTape, "variable does not belong to this tape");
    if (v.index() < 0 || static_cast<std::size_t>(v.index()) >= nodes_.size())
      throw Error(Errc::CrossTape, "variable is stale: its node was discarded by a rewind");
  }

 private:
  struct Node {
    std::int32_t a;
    std::int32_t b;
    double pa;
    double pb;
    TapeOp op;
  };

  std::vector<Node> nodes_;
  std::vector<double> adjoint_;  // reverse-sweep scratch, all-zero between sweeps
  std::size_t max_nodes_;
};

namespace detail {
inline Tape* same_tape(const TapeVar& a, const TapeVar& b) {
  Tape* t = a.tape();
  if (t == nullptr || b.tape() == nullptr)
    throw Error(Errc::CrossTape, "arithmetic on uninitialized tape variable");
  if (t != b.tape())
    throw Error(Errc::CrossTape, "arithmetic between variables of different tapes");
  t->check_owned(a);
  t->check_owned(b);
  return t;
}
inline Tape* own_tape(const TapeVar& a) {
  Tape* t = a.tape();
  if (t == nullptr) throw Error(Errc::CrossTape, "arithmetic on uninitialized tape variable");
  t->check_owned(a);
  return t;
}
}  // namespace detail

inline TapeVar operator+(const TapeVar& a, const TapeVar& b) {
  Tape* t = detail::same_tape(a, b);
  return TapeVar(t, t->push(TapeOp::kAdd, a.index(), b.index(), 1.0, 1.0), a.value() + b.value());
}
inline TapeVar operator-(const TapeVar& a, const TapeVar& b) {
  Tape* t = detail::same_tape(a, b);
  return TapeVar(t, t->push(TapeOp::kSub, a.index(), b.index(), 1.0, -1.0), a.value() - b.value());
}
inline TapeVar operator*(const TapeVar& a, const TapeVar& b) {
  Tape* t = detail::same_tape(a, b);
  return TapeVar(t, t->push(TapeOp::kMul, a.index(), b.index(), b.value(), a.value()), a.value() * b.value());
}
inline TapeVar operator/(const TapeVar& a, const TapeVar& b) {
  Tape* t = detail::same_tape(a, b);
  const double inv = detail::guarded_inv(b.value(), "tape division by near-zero value");
  const double v = a.value() * inv;
  return TapeVar(t, t->push(TapeOp::kDiv, a.index(), b.index(), inv, -v * inv), v);
}
inline TapeVar operator-(const TapeVar& x) {
  Tape* t = detail::own_tape(x);
  return TapeVar(t, t->push(TapeOp::kNeg, x.index(), -1, -1.0, 0.0), -x.value());
}

inline TapeVar operator+(const TapeVar& a, double c) {
  Tape* t = detail::own_tape(a);
  return TapeVar(t, t->push(TapeOp::kAdd, a.index(), -1, 1.0, 0.0), a.value() + c);
}
inline TapeVar operator+(double c, const TapeVar& a) { return a + c; }
inline TapeVar operator-(const TapeVar& a, double c) {
  Tape* t = detail::own_tape(a);
  return TapeVar(t, t->push(TapeOp::kSub, a.index(), -1, 1.0, 0.0), a.value() - c);
}
inline TapeVar operator-(double c, const TapeVar& a) {
  Tape* t = detail::own_tape(a);
  return TapeVar(t, t->push(TapeOp::kSub, a.index(), -1, -1.0, 0.0), c - a.value());
}
inline TapeVar operator*(const TapeVar& a, double c) {
  Tape* t = detail::own_tape(a);
  return TapeVar(t, t->push(TapeOp::kMul, a.index(), -1, c, 0.0), a.value() * c);
}
inline TapeVar operator*(double c, const TapeVar& a) { return a * c; }
inline TapeVar operator/(const TapeVar& a, double c) {
  Tape* t = detail::own_tape(a);
  const double inv = detail::guarded_inv(c, "tape division by near-zero constant");
  return TapeVar(t, t->push(TapeOp::kDiv, a.index(), -1, inv, 0.0), a.value() * inv);
}
inline TapeVar operator/(double c, const TapeVar& a) {
  Tape* t = detail::own_tape(a);
  const double inv = detail::guarded_inv(a.value(), "tape division by near-zero value");
  const double v = c * inv;
  return TapeVar(t, t->push(TapeOp::kDiv, a.index(), -1, -v * inv, 0.0), v);
}

inline TapeVar& TapeVar::operator+=(const TapeVar& o) { *this = *this + o; return *this; }
inline TapeVar& TapeVar::operator-=(const TapeVar& o) { *this = *this - o; return *this; }
inline TapeVar& TapeVar::operator*=(const TapeVar& o) { *this = *this * o; return *this; }
inline TapeVar& TapeVar::operator/=(const TapeVar& o) { *this = *this / o; return *this; }
inline TapeVar& TapeVar::operator+=(double c) { *this = *this + c; return *this; }
inline TapeVar& TapeVar::operator-=(double c) { *this = *this - c; return *this; }
inline TapeVar& TapeVar::operator*=(double c) { *this = *this * c; return *this; }
inline TapeVar& TapeVar::operator/=(double c) { *this = *this / c; return *this; }

inline TapeVar sin(const TapeVar& x) {
  Tape* t = detail::own_tape(x);
  return TapeVar(t, t->push(TapeOp::kSin, x.index(), -1, std::cos(x.value()), 0.0), std::sin(x.value()));
}
inline TapeVar cos(const TapeVar& x) {
  Tape* t = detail::own_tape(x);
  return TapeVar(t, t->push(TapeOp::kCos, x.index(), -1, -std::sin(x.value()), 0.0), std::cos(x.value()));
}
inline TapeVar tan(const TapeVar& x) {
  Tape* t = detail::own_tape(x);
  const double c = std::cos(x.value());
  const double inv = detail::guarded_inv(c * c, "tan near singularity");
  return TapeVar(t, t->push(TapeOp::kTan, x.index(), -1, inv, 0.0), std::tan(x.value()));
}
inline TapeVar exp(const TapeVar& x) {
  Tape* t = detail::own_tape(x);
  const double e = std::exp(x.value());
  return TapeVar(t, t->push(TapeOp::kExp, x.index(), -1, e, 0.0), e);
}
inline TapeVar log(const TapeVar& x) {
  Tape* t = detail::own_tape(x);
  if (x.value() <= 0.0) detail::throw_domain("log of non-positive value");
  return TapeVar(t, t->push(TapeOp::kLog, x.index(), -1, 1.0 / x.value(), 0.0), std::log(x.value()));
}
inline TapeVar sqrt(const TapeVar& x) {
  Tape* t = detail::own_tape(x);
  if (x.value() < 0.0) detail::throw_domain("sqrt of negative value");
  const double r = std::sqrt(x.value());
  return TapeVar(t, t->push(TapeOp::kSqrt, x.index(), -1, 0.5 * detail::guarded_inv(r, "sqrt derivative at zero"), 0.0), r);
}
inline TapeVar pow(const TapeVar& x, double c) {
  Tape* t = detail::own_tape(x);
  if (x.value() == 0.0 && c < 1.0) detail::throw_domain("pow with singular derivative at zero base");
  if (x.value() < 0.0 && c != std::floor(c)) detail::throw_domain("pow of negative base with non-integer exponent");
  return TapeVar(t, t->push(TapeOp::kPow, x.index(), -1, c * std::pow(x.value(), c - 1.0), 0.0), std::pow(x.value(), c));
}
inline TapeVar pow(const TapeVar& x, const TapeVar& y) {
  Tape* t = detail::same_tape(x, y);
  if (x.value() <= 0.0) detail::throw_domain("pow of non-positive base with variable exponent");
  const double v = std::pow(x.value(), y.value());
  return TapeVar(t, t->push(TapeOp::kPow, x.index(), y.index(), y.value() * v / x.value(), v * std::log(x.value())), v);
}
// Ties select the first argument, matching the dual-number convention.
inline TapeVar min(const TapeVar& a, const TapeVar& b) {
  Tape* t = detail::same_tape(a, b);
  const bool first = a.value() <= b.value();
  return TapeVar(t, t->push(TapeOp::kMin, a.index(), b.index(), first ? 1.0 : 0.0, first ? 0.0 : 1.0),
                 first ? a.value() : b.value());
}
inline TapeVar max(const TapeVar& a, const TapeVar& b) {
  Tape* t = detail::same_tape(a, b);
  const bool first = a.value() >= b.value();
  return TapeVar(t, t->push(TapeOp::kMax, a.index(), b.index(), first ? 1.0 : 0.0, first ? 0.0 : 1.0),
                 first ? a.value() : b.value());
}
inline TapeVar min(const TapeVar& a, double b) { return min(a, detail::own_tape(a)->input(b)); }
inline TapeVar max(const TapeVar& a, double b) { return max(a, detail::own_tape(a)->input(b)); }

// Spec-level entry points.
inline TapeVar record(Tape& tape, double value) { return tape.input(value); }
inline std::vector<double> grad(Tape& tape, const TapeVar& output, std::span<const TapeVar> inputs) {
  return tape.gradient(output, inputs);
}
inline void checkpoint_and_rewind(Tape& tape, std::size_t mark) { tape.rewind(mark); }

// Smooth |x| ~ sqrt(x^2 + eps); differentiable everywhere, usable with any
// scalar type.
template <typename T>
T abs_smooth(const T& x, double eps = 1e-12) {
  using std::sqrt;
  return sqrt(x * x + eps);
}

// Uniform accessors so generic code can read values off any scalar type.
inline double scalar_value(double x) { return x; }
inline double scalar_value(const DualScalar& x) { return x.value; }
inline double scalar_value(const TapeVar& x) { return x.value(); }

}  // namespace rigrad
