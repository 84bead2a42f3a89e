#pragma once

#include <array>
#include <cmath>
#include <utility>

namespace rigrad {

// Small fixed-size linear algebra templated on the scalar so the same
// dynamics code runs with double, dual numbers and tape variables.  Mixed
// double/T expressions are allowed wherever one operand is a model constant.

template <typename A, typename B>
using ScalarProduct = decltype(std::declval<A>() * std::declval<B>());

template <typename T>
struct Vec3 {
  T x{}, y{}, z{};
};
using Vec3d = Vec3<double>;

template <typename A, typename B>
auto operator+(const Vec3<A>& a, const Vec3<B>& b) -> Vec3<decltype(a.x + b.x)> {
  return {a.x + b.x, a.y + b.y, a.z + b.z};
}
template <typename A, typename B>
auto operator-(const Vec3<A>& a, const Vec3<B>& b) -> Vec3<decltype(a.x - b.x)> {
  return {a.x - b.x, a.y - b.y, a.z - b.z};
}
template <typename A, typename B>
auto operator*(const Vec3<A>& a, const B& s) -> Vec3<ScalarProduct<A, B>> {
  return {a.x * s, a.y * s, a.z * s};
}
template <typename T>
Vec3<T> operator-(const Vec3<T>& a) {
  return {-a.x, -a.y, -a.z};
}
template <typename A, typename B>
auto dot(const Vec3<A>& a, const Vec3<B>& b) -> ScalarProduct<A, B> {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}
template <typename A, typename B>
auto cross(const Vec3<A>& a, const Vec3<B>& b) -> Vec3<ScalarProduct<A, B>> {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <typename T>
struct Mat3 {
  std::array<std::array<T, 3>, 3> m{};

  std::array<T, 3>& operator[](int i) { return m[static_cast<std::size_t>(i)]; }
  const std::array<T, 3>& operator[](int i) const { return m[static_cast<std::size_t>(i)]; }
};
using Mat3d = Mat3<double>;

inline Mat3d mat3_identity() {
  Mat3d e;
  e[0][0] = e[1][1] = e[2][2] = 1.0;
  return e;
}

template <typename A, typename B>
auto operator*(const Mat3<A>& m, const Vec3<B>& v) -> Vec3<ScalarProduct<A, B>> {
  return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
          m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
          m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
}
// mᵀ v without materializing the transpose.
template <typename A, typename B>
auto transposed_mul(const Mat3<A>& m, const Vec3<B>& v) -> Vec3<ScalarProduct<A, B>> {
  return {m[0][0] * v.x + m[1][0] * v.y + m[2][0] * v.z,
          m[0][1] * v.x + m[1][1] * v.y + m[2][1] * v.z,
          m[0][2] * v.x + m[1][2] * v.y + m[2][2] * v.z};
}
template <typename A, typename B>
auto operator*(const Mat3<A>& a, const Mat3<B>& b) -> Mat3<ScalarProduct<A, B>> {
  Mat3<ScalarProduct<A, B>> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
  return r;
}
template <typename A, typename B>
auto operator+(const Mat3<A>& a, const Mat3<B>& b) -> Mat3<decltype(a[0][0] + b[0][0])> {
  Mat3<decltype(a[0][0] + b[0][0])> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = a[i][j] + b[i][j];
  return r;
}
template <typename A, typename B>
auto operator-(const Mat3<A>& a, const Mat3<B>& b) -> Mat3<decltype(a[0][0] - b[0][0])> {
  Mat3<decltype(a[0][0] - b[0][0])> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = a[i][j] - b[i][j];
  return r;
}
template <typename T>
Mat3<T> transpose(const Mat3<T>& a) {
  Mat3<T> r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = a[j][i];
  return r;
}
// Eᵀ M E, the frame rotation of a rank-2 block.
template <typename A, typename B>
auto rotate_block(const Mat3<A>& e, const Mat3<B>& m) -> Mat3<ScalarProduct<A, B>> {
  return transpose(e) * (m * e);
}

// skew(r) * M and M * skew(r) for a constant translation r; two multiplies
// per entry instead of a full matrix product.
template <typename T>
Mat3<T> skew_mul(const Vec3d& r, const Mat3<T>& m) {
  Mat3<T> out;
  for (int j = 0; j < 3; ++j) {
    out[0][j] = m[2][j] * r.y - m[1][j] * r.z;
    out[1][j] = m[0][j] * r.z - m[2][j] * r.x;
    out[2][j] = m[1][j] * r.x - m[0][j] * r.y;
  }
  return out;
}
template <typename T>
Mat3<T> mul_skew(const Mat3<T>& m, const Vec3d& r) {
  Mat3<T> out;
  for (int i = 0; i < 3; ++i) {
    out[i][0] = m[i][1] * r.z - m[i][2] * r.y;
    out[i][1] = m[i][2] * r.x - m[i][0] * r.z;
    out[i][2] = m[i][0] * r.y - m[i][1] * r.x;
  }
  return out;
}

inline Mat3d skew(const Vec3d& r) {
  Mat3d s;
  s[0][1] = -r.z; s[0][2] = r.y;
  s[1][0] = r.z;  s[1][2] = -r.x;
  s[2][0] = -r.y; s[2][1] = r.x;
  return s;
}
inline Mat3d outer(const Vec3d& a, const Vec3d& b) {
  Mat3d r;
  const double av[3] = {a.x, a.y, a.z};
  const double bv[3] = {b.x, b.y, b.z};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = av[i] * bv[j];
  return r;
}

// Rotation by angle about a unit axis (Rodrigues).
inline Mat3d axis_rotation(const Vec3d& axis, double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat3d r = outer(axis, axis);
  const Mat3d sk = skew(axis);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      r[i][j] = c * ((i == j ? 1.0 : 0.0) - r[i][j]) + s * sk[i][j] + r[i][j];
  return r;
}

// URDF rpy: extrinsic XYZ, i.e. R = Rz(yaw) Ry(pitch) Rx(roll).
inline Mat3d rpy_rotation(const std::array<double, 3>& rpy) {
  const Mat3d rx = axis_rotation({1, 0, 0}, rpy[0]);
  const Mat3d ry = axis_rotation({0, 1, 0}, rpy[1]);
  const Mat3d rz = axis_rotation({0, 0, 1}, rpy[2]);
  return rz * (ry * rx);
}

// Spatial (Plücker) vectors in link coordinates: [angular; linear].
template <typename T>
struct SpatialMotion {
  Vec3<T> ang, lin;
};
template <typename T>
struct SpatialForce {
  Vec3<T> ang, lin;
};

// Symmetric 6x6 spatial inertia in block form [[A, B], [Bᵀ, D]].
template <typename T>
struct SpatialInertia {
  Mat3<T> A, B, D;
};

template <typename T>
SpatialForce<T> apply_inertia(const SpatialInertia<T>& in, const SpatialMotion<T>& v) {
  return {in.A * v.ang + in.B * v.lin, transposed_mul(in.B, v.ang) + in.D * v.lin};
}

// f_a ×* f: spatial-force cross product (motion v, force f).
template <typename T>
SpatialForce<T> cross_force(const SpatialMotion<T>& v, const SpatialForce<T>& f) {
  return {cross(v.ang, f.ang) + cross(v.lin, f.lin), cross(v.ang, f.lin)};
}

}  // namespace rigrad
