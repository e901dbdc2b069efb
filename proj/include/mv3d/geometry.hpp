// Coordinate frames, camera models, frustum grids and temporal alignment.
//
// Every rigid transform carries source/destination frame labels and refuses
// to compose across mismatched frames. Mixing up frames silently is exactly
// the bug class the temporal alignment chain is prone to, so it is a hard
// runtime error here.
//
// Frame label convention: "cam<i>@<sweep>", "lidar@<sweep>", "ego@<sweep>",
// "global".
#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/mat4.hpp"

namespace mv3d {

inline std::string frame_cam(int cam, int sweep) {
  return "cam" + std::to_string(cam) + "@" + std::to_string(sweep);
}
inline std::string frame_lidar(int sweep) { return "lidar@" + std::to_string(sweep); }
inline std::string frame_ego(int sweep) { return "ego@" + std::to_string(sweep); }
inline const char* frame_global() { return "global"; }

// SE(3) transform taking points from src_frame to dst_frame.
struct RigidTransform {
  Mat4 m = Mat4::identity();
  std::string src_frame, dst_frame;

  static RigidTransform make(const Mat4& m, std::string src, std::string dst) {
    validate(m);
    RigidTransform t;
    t.m = m;
    t.src_frame = std::move(src);
    t.dst_frame = std::move(dst);
    return t;
  }

  static RigidTransform identity(std::string src, std::string dst) {
    return make(Mat4::identity(), std::move(src), std::move(dst));
  }

  static void validate(const Mat4& m) {
    if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0)
      throw std::invalid_argument("RigidTransform: bottom row must be [0,0,0,1]");
    // R^T R = I and det(R) = 1 within 1e-9
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += m(k, i) * m(k, j);
        double want = (i == j) ? 1.0 : 0.0;
        if (std::fabs(s - want) > 1e-9)
          throw std::invalid_argument("RigidTransform: rotation block is not orthonormal");
      }
    double det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
                 m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
                 m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    if (std::fabs(det - 1.0) > 1e-9)
      throw std::invalid_argument("RigidTransform: rotation determinant is not +1");
  }

  RigidTransform inverse() const {
    // [R t; 0 1]^-1 = [R^T -R^T t; 0 1]
    Mat4 inv = Mat4::identity();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) inv(i, j) = m(j, i);
    for (int i = 0; i < 3; ++i) {
      double s = 0;
      for (int j = 0; j < 3; ++j) s += inv(i, j) * m(j, 3);
      inv(i, 3) = -s;
    }
    RigidTransform t;
    t.m = inv;
    t.src_frame = dst_frame;
    t.dst_frame = src_frame;
    return t;
  }

  Vec3 apply(const Vec3& p) const { return m.apply_point(p); }
};

// a after b: maps b.src_frame -> a.dst_frame. Requires b.dst == a.src.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  if (a.src_frame != b.dst_frame)
    throw std::invalid_argument("compose: frame mismatch, cannot chain '" + b.src_frame + "->" +
                                b.dst_frame + "' into '" + a.src_frame + "->" + a.dst_frame + "'");
  RigidTransform t;
  t.m = a.m * b.m;
  t.src_frame = b.src_frame;
  t.dst_frame = a.dst_frame;
  return t;
}

struct CameraIntrinsics {
  Mat4 k = Mat4::identity();

  // Pinhole with focal lengths (pixels) and principal point (pixels),
  // padded to 4x4 homogeneous form.
  static CameraIntrinsics make(double fx, double fy, double cx, double cy) {
    if (fx <= 0 || fy <= 0) throw std::invalid_argument("CameraIntrinsics: focal lengths must be > 0");
    CameraIntrinsics c;
    c.k(0, 0) = fx;
    c.k(1, 1) = fy;
    c.k(0, 2) = cx;
    c.k(1, 2) = cy;
    return c;
  }

  Mat4 inverse() const {
    double fx = k(0, 0), fy = k(1, 1);
    if (std::fabs(fx) < 1e-12 || std::fabs(fy) < 1e-12)
      throw std::invalid_argument("CameraIntrinsics: singular K");
    return mat4_inverse(k);
  }

  // (x, y, z) camera point -> (u, v) pixel and depth d = z.
  std::array<double, 3> project(const Vec3& p) const {
    auto v = k.apply({p.x, p.y, p.z, 1.0});
    return {v[0] / v[2], v[1] / v[2], v[2]};
  }

  double fx() const { return k(0, 0); }
  double fy() const { return k(1, 1); }
  double cx() const { return k(0, 2); }
  double cy() const { return k(1, 2); }
};

struct DepthSpec {
  int bins = 64;
  double near = 1.0;
  double far = 60.0;

  std::vector<double> linspace() const {
    if (bins < 1) throw std::invalid_argument("DepthSpec: bins must be >= 1");
    if (!(near > 0) || !(far >= near)) throw std::invalid_argument("DepthSpec: need 0 < near <= far");
    std::vector<double> d(static_cast<size_t>(bins));
    if (bins == 1) {
      d[0] = near;
      return d;
    }
    for (int i = 0; i < bins; ++i)
      d[static_cast<size_t>(i)] = near + (far - near) * static_cast<double>(i) / (bins - 1);
    return d;
  }
};

// Meshgrid of homogeneous points (u*d, v*d, d, 1) over feature-map pixel
// centers and depth bins. Point order is row-major (i over rows, j over
// columns, k over depths).
struct FrustumGrid {
  int feat_w = 0, feat_h = 0, stride = 0;
  std::vector<double> depths;
  std::vector<std::array<double, 4>> points;

  int64_t count() const { return static_cast<int64_t>(points.size()); }
};

inline FrustumGrid make_frustum_grid(int feat_w, int feat_h, int stride, const DepthSpec& spec) {
  if (feat_w < 1 || feat_h < 1 || stride < 1)
    throw std::invalid_argument("make_frustum_grid: dimensions must be positive");
  FrustumGrid g;
  g.feat_w = feat_w;
  g.feat_h = feat_h;
  g.stride = stride;
  g.depths = spec.linspace();
  g.points.reserve(static_cast<size_t>(feat_w) * feat_h * g.depths.size());
  for (int i = 0; i < feat_h; ++i) {
    double v = (i + 0.5) * stride;  // pixel centers at +0.5 convention
    for (int j = 0; j < feat_w; ++j) {
      double u = (j + 0.5) * stride;
      for (double d : g.depths) g.points.push_back({u * d, v * d, d, 1.0});
    }
  }
  return g;
}

// Per-camera grid of 3D points with a validity mask. `normalized` marks
// whether values have been mapped into [0,1]^3.
struct Coords3D {
  int feat_w = 0, feat_h = 0, depth_bins = 0;
  std::vector<Vec3> pts;          // feat_h * feat_w * depth_bins, row-major (i, j, k)
  std::vector<uint8_t> mask;      // same order; 1 = inside region of interest
  std::string frame;
  bool normalized = false;

  int64_t count() const { return static_cast<int64_t>(pts.size()); }
};

// P = T_cam_to_lidar * K^-1 * p for every frustum point (Hf x Wf x D).
inline Coords3D unproject_to_lidar(const FrustumGrid& grid, const CameraIntrinsics& intr,
                                   const RigidTransform& cam_to_lidar) {
  if (cam_to_lidar.src_frame.rfind("cam", 0) != 0 || cam_to_lidar.dst_frame.rfind("lidar", 0) != 0)
    throw std::invalid_argument("unproject_to_lidar: expected a cam->lidar transform, got '" +
                                cam_to_lidar.src_frame + "->" + cam_to_lidar.dst_frame + "'");
  Mat4 kinv = intr.inverse();
  Mat4 full = cam_to_lidar.m * kinv;
  Coords3D c;
  c.feat_w = grid.feat_w;
  c.feat_h = grid.feat_h;
  c.depth_bins = static_cast<int>(grid.depths.size());
  c.frame = cam_to_lidar.dst_frame;
  c.pts.reserve(grid.points.size());
  c.mask.assign(grid.points.size(), 1);
  for (const auto& p : grid.points) {
    auto v = full.apply(p);
    c.pts.push_back({v[0] / v[3], v[1] / v[3], v[2] / v[3]});
  }
  return c;
}

// Relative pose of the lidar frame between two sweeps, routed through the
// global frame:
//   rel = inv(lidar_to_ego_t) * inv(ego_to_global_t) * ego_to_global_prev * lidar_to_ego_prev
// Takes points expressed in lidar@prev to lidar@t.
inline RigidTransform relative_lidar_transform(const RigidTransform& lidar_to_ego_t,
                                               const RigidTransform& ego_to_global_t,
                                               const RigidTransform& lidar_to_ego_prev,
                                               const RigidTransform& ego_to_global_prev) {
  auto check = [](const RigidTransform& t, const char* src_kind, const char* dst_kind,
                  const char* what) {
    if (t.src_frame.rfind(src_kind, 0) != 0 || t.dst_frame.rfind(dst_kind, 0) != 0)
      throw std::invalid_argument(std::string("relative_lidar_transform: ") + what +
                                  " has frames '" + t.src_frame + "->" + t.dst_frame + "'");
  };
  check(lidar_to_ego_t, "lidar", "ego", "lidar_to_ego_t");
  check(ego_to_global_t, "ego", "global", "ego_to_global_t");
  check(lidar_to_ego_prev, "lidar", "ego", "lidar_to_ego_prev");
  check(ego_to_global_prev, "ego", "global", "ego_to_global_prev");
  return compose(lidar_to_ego_t.inverse(),
                 compose(ego_to_global_t.inverse(),
                         compose(ego_to_global_prev, lidar_to_ego_prev)));
}

inline Coords3D align_coords(const Coords3D& prev, const RigidTransform& rel) {
  if (prev.frame != rel.src_frame)
    throw std::invalid_argument("align_coords: coords are in '" + prev.frame +
                                "' but transform maps from '" + rel.src_frame + "'");
  Coords3D out = prev;
  out.frame = rel.dst_frame;
  for (auto& p : out.pts) p = rel.apply(p);
  return out;
}

// Axis-aligned region of interest, meters.
struct Roi {
  double x_min = -61.2, x_max = 61.2;
  double y_min = -61.2, y_max = 61.2;
  double z_min = -10.0, z_max = 10.0;

  void validate() const {
    if (!(x_max > x_min) || !(y_max > y_min) || !(z_max > z_min))
      throw std::invalid_argument("Roi: degenerate extent");
  }
  bool contains(const Vec3& p) const {
    return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max && p.z >= z_min &&
           p.z <= z_max;
  }
};

// Maps each axis affinely so the ROI becomes [0,1]^3. Out-of-ROI points are
// clamped to the boundary and masked out.
inline Coords3D normalize_coords(const Coords3D& coords, const Roi& roi) {
  roi.validate();
  Coords3D out = coords;
  out.normalized = true;
  auto norm1 = [](double v, double lo, double hi) { return (v - lo) / (hi - lo); };
  for (size_t i = 0; i < out.pts.size(); ++i) {
    Vec3 n{norm1(out.pts[i].x, roi.x_min, roi.x_max), norm1(out.pts[i].y, roi.y_min, roi.y_max),
           norm1(out.pts[i].z, roi.z_min, roi.z_max)};
    bool inside = n.x >= 0 && n.x <= 1 && n.y >= 0 && n.y <= 1 && n.z >= 0 && n.z <= 1;
    out.mask[i] = inside ? 1 : 0;
    out.pts[i] = {std::clamp(n.x, 0.0, 1.0), std::clamp(n.y, 0.0, 1.0), std::clamp(n.z, 0.0, 1.0)};
  }
  return out;
}

}  // namespace mv3d
