#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>

#include "poselift/common.hpp"
#include "poselift/rng.hpp"

namespace poselift {

// 3x3 rotation matrix, row-major.
struct RotMat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  double operator()(int r, int c) const { return m[static_cast<size_t>(r * 3 + c)]; }
  double& operator()(int r, int c) { return m[static_cast<size_t>(r * 3 + c)]; }

  static RotMat3 identity() { return RotMat3{}; }
};

// First two columns of a rotation matrix, stacked column-major:
// (r1x, r1y, r1z, r2x, r2y, r2z). Unconstrained as an embedding.
using Rot6D = std::array<double, 6>;

// Euler angles in degrees, intrinsic Z-then-X-then-Y composition.
struct EulerZXY {
  double z = 0.0;
  double x = 0.0;
  double y = 0.0;
};

// 2x2 rotation matrix, row-major.
using RotMat2 = std::array<double, 4>;

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;

namespace rot {

constexpr double kPi = 3.14159265358979323846;
constexpr double kDegenerateEps = 1e-8;

inline std::atomic<uint64_t>& degeneracy_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

inline RotMat3 multiply(const RotMat3& a, const RotMat3& b) {
  RotMat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += a(i, k) * b(k, j);
      r(i, j) = acc;
    }
  return r;
}

inline RotMat3 transpose(const RotMat3& a) {
  RotMat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(j, i);
  return r;
}

inline Vec3 apply(const RotMat3& a, const Vec3& v) {
  Vec3 r;
  for (int i = 0; i < 3; ++i)
    r[static_cast<size_t>(i)] = a(i, 0) * v[0] + a(i, 1) * v[1] + a(i, 2) * v[2];
  return r;
}

inline double det(const RotMat3& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

// Frobenius distance of RᵀR from I, for validity checks.
inline double orthonormality_error(const RotMat3& a) {
  RotMat3 g = multiply(transpose(a), a);
  double err = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double d = g(i, j) - (i == j ? 1.0 : 0.0);
      err += d * d;
    }
  return std::sqrt(err);
}

inline bool is_valid(const RotMat3& a, double tol = 1e-9) {
  return orthonormality_error(a) <= tol && std::fabs(det(a) - 1.0) <= tol;
}

// Drop the last column.
inline Rot6D to_6d(const RotMat3& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

// Gram-Schmidt recovery: r1' = φ(r1), r2' = φ(r2 − (r1'·r2)r1'), r3' = r1'×r2'.
// Throws on degenerate input; see from_6d_guarded for the training-path guard.
inline RotMat3 from_6d(const Rot6D& v) {
  Vec3 r1{v[0], v[1], v[2]};
  Vec3 r2{v[3], v[4], v[5]};
  double n1 = std::sqrt(r1[0] * r1[0] + r1[1] * r1[1] + r1[2] * r1[2]);
  if (n1 < kDegenerateEps)
    throw numeric_error("from_6d: first column has near-zero norm " +
                        std::to_string(n1));
  Vec3 c1{r1[0] / n1, r1[1] / n1, r1[2] / n1};
  double d = c1[0] * r2[0] + c1[1] * r2[1] + c1[2] * r2[2];
  Vec3 u2{r2[0] - d * c1[0], r2[1] - d * c1[1], r2[2] - d * c1[2]};
  double n2 = std::sqrt(u2[0] * u2[0] + u2[1] * u2[1] + u2[2] * u2[2]);
  if (n2 < kDegenerateEps)
    throw numeric_error("from_6d: columns are near-parallel");
  Vec3 c2{u2[0] / n2, u2[1] / n2, u2[2] / n2};
  Vec3 c3{c1[1] * c2[2] - c1[2] * c2[1], c1[2] * c2[0] - c1[0] * c2[2],
          c1[0] * c2[1] - c1[1] * c2[0]};
  RotMat3 r;
  for (int i = 0; i < 3; ++i) {
    r(i, 0) = c1[static_cast<size_t>(i)];
    r(i, 1) = c2[static_cast<size_t>(i)];
    r(i, 2) = c3[static_cast<size_t>(i)];
  }
  return r;
}

// Non-throwing variant: degenerate input yields identity and bumps the
// process-wide degeneracy counter so long runs stay alive but observable.
inline RotMat3 from_6d_guarded(const Rot6D& v) {
  Vec3 r1{v[0], v[1], v[2]};
  double n1 = std::sqrt(r1[0] * r1[0] + r1[1] * r1[1] + r1[2] * r1[2]);
  if (n1 < kDegenerateEps) {
    degeneracy_counter().fetch_add(1);
    return RotMat3::identity();
  }
  Vec3 c1{r1[0] / n1, r1[1] / n1, r1[2] / n1};
  double d = c1[0] * v[3] + c1[1] * v[4] + c1[2] * v[5];
  Vec3 u2{v[3] - d * c1[0], v[4] - d * c1[1], v[5] - d * c1[2]};
  double n2 = std::sqrt(u2[0] * u2[0] + u2[1] * u2[1] + u2[2] * u2[2]);
  if (n2 < kDegenerateEps) {
    degeneracy_counter().fetch_add(1);
    return RotMat3::identity();
  }
  return from_6d(v);
}

// Geodesic distance on SO(3). Equal in exact arithmetic to
// arccos((trace(R1ᵀR2) − 1)/2); computed as atan2(sin, cos) with the sine
// taken from the skew part, which stays accurate where arccos loses half the
// significant digits (near 0 and pi) and absorbs roundoff past ±1 for free.
inline double geodesic(const RotMat3& a, const RotMat3& b) {
  RotMat3 rel = multiply(transpose(a), b);
  double tr = rel(0, 0) + rel(1, 1) + rel(2, 2);
  double c = (tr - 1.0) / 2.0;
  double vx = rel(2, 1) - rel(1, 2);
  double vy = rel(0, 2) - rel(2, 0);
  double vz = rel(1, 0) - rel(0, 1);
  double s = 0.5 * std::sqrt(vx * vx + vy * vy + vz * vz);
  return std::atan2(s, c);
}

inline RotMat3 rot_z(double rad) {
  double c = std::cos(rad), s = std::sin(rad);
  RotMat3 r;
  r.m = {c, -s, 0, s, c, 0, 0, 0, 1};
  return r;
}

inline RotMat3 rot_x(double rad) {
  double c = std::cos(rad), s = std::sin(rad);
  RotMat3 r;
  r.m = {1, 0, 0, 0, c, -s, 0, s, c};
  return r;
}

inline RotMat3 rot_y(double rad) {
  double c = std::cos(rad), s = std::sin(rad);
  RotMat3 r;
  r.m = {c, 0, s, 0, 1, 0, -s, 0, c};
  return r;
}

inline double deg2rad(double deg) { return deg * kPi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / kPi; }

// Intrinsic Z·X·Y composition (angles in degrees).
inline RotMat3 euler_zxy_to_mat(const EulerZXY& e) {
  return multiply(multiply(rot_z(deg2rad(e.z)), rot_x(deg2rad(e.x))),
                  rot_y(deg2rad(e.y)));
}

inline double wrap_deg(double a) {
  double w = std::fmod(a + 180.0, 360.0);
  if (w < 0.0) w += 360.0;
  return w - 180.0;
}

inline EulerZXY normalize_euler(const EulerZXY& e) {
  return {wrap_deg(e.z), wrap_deg(e.x), wrap_deg(e.y)};
}

// Rodrigues formula, axis need not be normalized.
inline RotMat3 axis_angle_to_mat(const Vec3& axis, double rad) {
  double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (n < kDegenerateEps)
    throw numeric_error("axis_angle_to_mat: zero axis");
  double x = axis[0] / n, y = axis[1] / n, z = axis[2] / n;
  double c = std::cos(rad), s = std::sin(rad), t = 1.0 - c;
  RotMat3 r;
  r.m = {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
         t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
         t * x * z - s * y, t * y * z + s * x, t * z * z + c};
  return r;
}

inline RotMat3 random_rotation(SplitMix64& rng) {
  Vec3 axis{rng.normal(), rng.normal(), rng.normal()};
  double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  if (n < 1e-12) axis = {1, 0, 0};
  return axis_angle_to_mat(axis, rng.uniform(0.0, kPi));
}

// 2D rotation taking the normalized parent direction to the normalized child
// direction. Root-adjacent bones pass the image +Y axis as pseudo-parent.
inline RotMat2 bone_rot2d(const Vec2& parent_dir, const Vec2& child_dir) {
  double np = std::sqrt(parent_dir[0] * parent_dir[0] + parent_dir[1] * parent_dir[1]);
  double nc = std::sqrt(child_dir[0] * child_dir[0] + child_dir[1] * child_dir[1]);
  if (np < kDegenerateEps || nc < kDegenerateEps)
    throw numeric_error("bone_rot2d: zero-length bone direction");
  double px = parent_dir[0] / np, py = parent_dir[1] / np;
  double cx = child_dir[0] / nc, cy = child_dir[1] / nc;
  double c = px * cx + py * cy;   // cos  = p̂·ĉ
  double s = px * cy - py * cx;   // sin  = p̂×ĉ
  return {c, -s, s, c};
}

}  // namespace rot
}  // namespace poselift
