#pragma once

#include <array>
#include <cmath>

#include "rigrad/autodiff.hpp"

namespace rigrad {

// Forward-mode scalar carrying N derivative slots at once.  The trajectory
// optimizer uses it to extract per-tick state/control Jacobians in a few
// passes; the contiguous slot array vectorizes well.
template <int N>
struct DualN {
  double v = 0.0;
  std::array<double, N> d{};

  DualN() = default;
  DualN(double x) : v(x) {}  // NOLINT: constants are passive

  static DualN seeded(double x, int slot) {
    DualN r(x);
    if (slot >= 0 && slot < N) r.d[static_cast<std::size_t>(slot)] = 1.0;
    return r;
  }

  DualN& operator+=(const DualN& o) {
    v += o.v;
    for (int i = 0; i < N; ++i) d[static_cast<std::size_t>(i)] += o.d[static_cast<std::size_t>(i)];
    return *this;
  }
};

template <int N>
DualN<N> operator+(const DualN<N>& a, const DualN<N>& b) {
  DualN<N> r(a.v + b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
template <int N>
DualN<N> operator-(const DualN<N>& a, const DualN<N>& b) {
  DualN<N> r(a.v - b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
template <int N>
DualN<N> operator*(const DualN<N>& a, const DualN<N>& b) {
  DualN<N> r(a.v * b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
template <int N>
DualN<N> operator/(const DualN<N>& a, const DualN<N>& b) {
  const double inv = detail::guarded_inv(b.v, "dual division by near-zero value");
  DualN<N> r(a.v * inv);
  for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) * inv;
  return r;
}
template <int N>
DualN<N> operator-(const DualN<N>& a) {
  DualN<N> r(-a.v);
  for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
  return r;
}

template <int N> DualN<N> operator+(const DualN<N>& a, double c) { DualN<N> r = a; r.v += c; return r; }
template <int N> DualN<N> operator+(double c, const DualN<N>& a) { return a + c; }
template <int N> DualN<N> operator-(const DualN<N>& a, double c) { DualN<N> r = a; r.v -= c; return r; }
template <int N>
DualN<N> operator-(double c, const DualN<N>& a) {
  DualN<N> r(c - a.v);
  for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
  return r;
}
template <int N>
DualN<N> operator*(const DualN<N>& a, double c) {
  DualN<N> r(a.v * c);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * c;
  return r;
}
template <int N> DualN<N> operator*(double c, const DualN<N>& a) { return a * c; }
template <int N>
DualN<N> operator/(const DualN<N>& a, double c) {
  return a * detail::guarded_inv(c, "dual division by near-zero constant");
}
template <int N>
DualN<N> operator/(double c, const DualN<N>& a) {
  const double inv = detail::guarded_inv(a.v, "dual division by near-zero value");
  DualN<N> r(c * inv);
  for (int i = 0; i < N; ++i) r.d[i] = -r.v * inv * a.d[i];
  return r;
}

template <int N>
DualN<N> sin(const DualN<N>& x) {
  const double c = std::cos(x.v);
  DualN<N> r(std::sin(x.v));
  for (int i = 0; i < N; ++i) r.d[i] = c * x.d[i];
  return r;
}
template <int N>
DualN<N> cos(const DualN<N>& x) {
  const double s = std::sin(x.v);
  DualN<N> r(std::cos(x.v));
  for (int i = 0; i < N; ++i) r.d[i] = -s * x.d[i];
  return r;
}

template <int N> bool operator<(const DualN<N>& a, const DualN<N>& b) { return a.v < b.v; }
template <int N> bool operator>(const DualN<N>& a, const DualN<N>& b) { return a.v > b.v; }

template <int N>
double scalar_value(const DualN<N>& x) {
  return x.v;
}

}  // namespace rigrad
