// Small fixed-size linear algebra for homogeneous 4x4 transforms.
#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace mv3d {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
};

// Row-major 4x4 matrix.
struct Mat4 {
  std::array<double, 16> m{};

  double& operator()(int r, int c) { return m[r * 4 + c]; }
  double operator()(int r, int c) const { return m[r * 4 + c]; }

  static Mat4 identity() {
    Mat4 out;
    out.m = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    return out;
  }

  Mat4 operator*(const Mat4& b) const {
    Mat4 out;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += (*this)(r, k) * b(k, c);
        out(r, c) = s;
      }
    return out;
  }

  std::array<double, 4> apply(const std::array<double, 4>& v) const {
    std::array<double, 4> out{};
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += (*this)(r, k) * v[k];
      out[r] = s;
    }
    return out;
  }

  // Applies to a 3D point assuming homogeneous w = 1.
  Vec3 apply_point(const Vec3& p) const {
    auto v = apply({p.x, p.y, p.z, 1.0});
    return {v[0] / v[3], v[1] / v[3], v[2] / v[3]};
  }
};

inline Mat4 mat4_from_rt(const std::array<double, 9>& r, const Vec3& t) {
  Mat4 out = Mat4::identity();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out(i, j) = r[i * 3 + j];
  out(0, 3) = t.x;
  out(1, 3) = t.y;
  out(2, 3) = t.z;
  return out;
}

inline std::array<double, 9> rot_x(double a) {
  double c = std::cos(a), s = std::sin(a);
  return {1, 0, 0, 0, c, -s, 0, s, c};
}

inline std::array<double, 9> rot_y(double a) {
  double c = std::cos(a), s = std::sin(a);
  return {c, 0, s, 0, 1, 0, -s, 0, c};
}

inline std::array<double, 9> rot_z(double a) {
  double c = std::cos(a), s = std::sin(a);
  return {c, -s, 0, s, c, 0, 0, 0, 1};
}

inline std::array<double, 9> rot_mul(const std::array<double, 9>& a, const std::array<double, 9>& b) {
  std::array<double, 9> out{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) out[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return out;
}

// General 4x4 inverse by Gauss-Jordan with partial pivoting.
inline Mat4 mat4_inverse(const Mat4& in) {
  std::array<double, 32> a{};
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) a[r * 8 + c] = in(r, c);
    a[r * 8 + 4 + r] = 1.0;
  }
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::fabs(a[r * 8 + col]) > std::fabs(a[piv * 8 + col])) piv = r;
    if (std::fabs(a[piv * 8 + col]) < 1e-14) throw std::invalid_argument("mat4_inverse: singular matrix");
    if (piv != col)
      for (int c = 0; c < 8; ++c) std::swap(a[piv * 8 + c], a[col * 8 + c]);
    double d = a[col * 8 + col];
    for (int c = 0; c < 8; ++c) a[col * 8 + c] /= d;
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      double f = a[r * 8 + col];
      if (f == 0) continue;
      for (int c = 0; c < 8; ++c) a[r * 8 + c] -= f * a[col * 8 + c];
    }
  }
  Mat4 out;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) out(r, c) = a[r * 8 + 4 + c];
  return out;
}

}  // namespace mv3d
