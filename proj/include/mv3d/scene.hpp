// Synthetic multi-camera driving world.
//
// A scene is an ego vehicle following a smooth randomized trajectory, a ring
// of pinhole cameras rigidly mounted around its lidar, and a handful of
// vehicle-like boxes moving at constant velocity. Cameras render class-coded
// silhouettes with painter's-algorithm occlusion. Sweeps happen every T
// seconds; annotated keyframes every few sweeps.
//
// Conventions: lidar/ego frames are x forward, y left, z up; ground is
// global z = 0. Camera frames are x right, y down, z forward. Object size is
// (w across, l along heading, h). Ground-truth yaw and velocity are
// expressed in the lidar frame of the annotated sweep.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/geometry.hpp"
#include "mv3d/heads.hpp"
#include "mv3d/pgm.hpp"
#include "mv3d/rng.hpp"

namespace mv3d {

struct SceneObject {
  int cls = 0;        // 0 car, 1 truck, 2 bus
  Vec3 center;        // global frame at sweep 0
  Vec3 size;          // w, l, h (meters)
  double yaw = 0;     // global heading
  double vx = 0, vy = 0;  // global frame, m/s, constant

  Vec3 center_at(double t) const { return {center.x + vx * t, center.y + vy * t, center.z}; }
};

struct CameraRig {
  int img_w = 0, img_h = 0;
  std::vector<CameraIntrinsics> intrinsics;
  std::vector<Mat4> cam_to_lidar;  // raw matrices; frame labels attach per sweep

  int cameras() const { return static_cast<int>(intrinsics.size()); }
  RigidTransform cam_to_lidar_t(int cam, int sweep) const {
    return RigidTransform::make(cam_to_lidar[static_cast<size_t>(cam)], frame_cam(cam, sweep),
                                frame_lidar(sweep));
  }
};

struct SceneSequence {
  int scene_id = 0;
  uint64_t seed = 0;
  double sweep_interval = 0.083;  // seconds between sweeps
  std::vector<double> timestamps;
  std::vector<Mat4> ego_to_global;  // per sweep
  Mat4 lidar_to_ego = Mat4::identity();
  CameraRig rig;
  std::vector<SceneObject> objects;
  std::vector<int> keyframes;

  int sweeps() const { return static_cast<int>(timestamps.size()); }

  RigidTransform ego_to_global_t(int sweep) const {
    return RigidTransform::make(ego_to_global[static_cast<size_t>(sweep)], frame_ego(sweep),
                                frame_global());
  }
  RigidTransform lidar_to_ego_t(int sweep) const {
    return RigidTransform::make(lidar_to_ego, frame_lidar(sweep), frame_ego(sweep));
  }
  RigidTransform lidar_to_global(int sweep) const {
    return compose(ego_to_global_t(sweep), lidar_to_ego_t(sweep));
  }
};

struct SceneConfig {
  int n_sweeps = 40;
  double sweep_interval = 0.083;
  int keyframe_every = 6;
  int cameras = 2;
  int img_w = 128, img_h = 128;
  double focal_px = 70.0;
  int min_objects = 3, max_objects = 6;
  double spawn_r_min = 8.0, spawn_r_max = 38.0;
  double moving_fraction = 0.65;
  double speed_min = 2.0, speed_max = 9.0;   // object speeds
  double max_speed_cap = 12.0;               // |velocity| invariant bound
  double ego_speed_min = 3.0, ego_speed_max = 8.0;
  double ego_yaw_rate_max = 0.12;  // rad/s, slowly varying
  double road_half_width = 8.0;
  double lane_offsets[3] = {-3.5, 0.0, 3.5};
  double lane_half_width = 0.3;

  void validate() const {
    if (n_sweeps < 1 || cameras < 1 || img_w < 16 || img_h < 16)
      throw std::invalid_argument("SceneConfig: bad sweep/camera/image counts");
    if (min_objects < 0 || max_objects < min_objects)
      throw std::invalid_argument("SceneConfig: bad object count range");
    if (!(spawn_r_min > 0) || !(spawn_r_max > spawn_r_min))
      throw std::invalid_argument("SceneConfig: bad spawn radius range");
    if (speed_max > max_speed_cap)
      throw std::invalid_argument("SceneConfig: speed_max exceeds the velocity cap");
    if (keyframe_every < 1) throw std::invalid_argument("SceneConfig: keyframe_every must be >= 1");
  }
};

namespace detail {

// Camera optical axis along lidar +x, rotated by the mount azimuth.
inline Mat4 camera_mount(double azimuth, double radius) {
  std::array<double, 9> base = {0, 0, 1, -1, 0, 0, 0, -1, 0};  // cam axes -> lidar axes
  auto r = rot_mul(rot_z(azimuth), base);
  Vec3 t{radius * std::cos(azimuth), radius * std::sin(azimuth), -0.3};
  return mat4_from_rt(r, t);
}

}  // namespace detail

inline CameraRig make_camera_rig(const SceneConfig& cfg) {
  CameraRig rig;
  rig.img_w = cfg.img_w;
  rig.img_h = cfg.img_h;
  for (int i = 0; i < cfg.cameras; ++i) {
    double azimuth = 2.0 * M_PI * i / cfg.cameras;
    rig.intrinsics.push_back(
        CameraIntrinsics::make(cfg.focal_px, cfg.focal_px, cfg.img_w / 2.0, cfg.img_h / 2.0));
    rig.cam_to_lidar.push_back(detail::camera_mount(azimuth, 1.0));
  }
  return rig;
}

inline const Vec3& class_base_size(int cls) {
  static const Vec3 sizes[3] = {{1.9, 4.4, 1.6}, {2.5, 7.5, 2.8}, {2.9, 10.5, 3.3}};
  return sizes[static_cast<size_t>(cls)];
}

inline double class_intensity(int cls) {
  static const double levels[3] = {90.0, 160.0, 230.0};
  return levels[static_cast<size_t>(cls)];
}

// Deterministic scene from (config, seed, scene_id). Objects spawn inside the
// camera field-of-view sectors around the ego start pose; the ego follows a
// smooth curve with slowly varying speed and yaw rate.
inline SceneSequence generate_scene(const SceneConfig& cfg, uint64_t seed, int scene_id) {
  cfg.validate();
  Rng rng(mix_seed(seed, static_cast<uint64_t>(scene_id), 0x5ce8e));
  SceneSequence seq;
  seq.scene_id = scene_id;
  seq.seed = seed;
  seq.sweep_interval = cfg.sweep_interval;
  seq.rig = make_camera_rig(cfg);
  seq.lidar_to_ego = mat4_from_rt({1, 0, 0, 0, 1, 0, 0, 0, 1}, {0.9, 0.0, 1.7});

  // ego trajectory
  double heading = rng.uniform(0, 2.0 * M_PI);
  double base_speed = rng.uniform(cfg.ego_speed_min, cfg.ego_speed_max);
  double speed_amp = rng.uniform(0.0, 0.35 * base_speed);
  double speed_phase = rng.uniform(0, 2.0 * M_PI);
  double yaw_rate_amp = rng.uniform(0.2, 1.0) * cfg.ego_yaw_rate_max;
  double yaw_phase = rng.uniform(0, 2.0 * M_PI);
  double x = 0, y = 0;
  for (int k = 0; k < cfg.n_sweeps; ++k) {
    double t = k * cfg.sweep_interval;
    seq.timestamps.push_back(t);
    seq.ego_to_global.push_back(mat4_from_rt(rot_z(heading), {x, y, 0}));
    if (k % cfg.keyframe_every == 0) seq.keyframes.push_back(k);
    double speed = base_speed + speed_amp * std::sin(0.35 * t + speed_phase);
    double yaw_rate = yaw_rate_amp * std::sin(0.25 * t + yaw_phase);
    heading += yaw_rate * cfg.sweep_interval;
    x += speed * cfg.sweep_interval * std::cos(heading);
    y += speed * cfg.sweep_interval * std::sin(heading);
  }

  // objects, spawned in camera-visible sectors of the start pose
  auto start_pose = seq.ego_to_global[0];
  double half_fov = std::atan2(cfg.img_w / 2.0, cfg.focal_px);
  int n_obj = static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));
  for (int i = 0; i < n_obj; ++i) {
    SceneObject obj;
    obj.cls = static_cast<int>(rng.uniform_int(0, 2));
    const Vec3& base = class_base_size(obj.cls);
    double jitter = rng.uniform(0.9, 1.1);
    obj.size = {base.x * jitter, base.y * jitter, base.z * jitter};
    int cam = static_cast<int>(rng.uniform_int(0, cfg.cameras - 1));
    double cam_azimuth = 2.0 * M_PI * cam / cfg.cameras;
    double angle = cam_azimuth + rng.uniform(-0.8 * half_fov, 0.8 * half_fov);
    double radius = rng.uniform(cfg.spawn_r_min, cfg.spawn_r_max);
    Vec3 in_ego{radius * std::cos(angle), radius * std::sin(angle), base.z * jitter / 2.0};
    obj.center = start_pose.apply_point(in_ego);
    obj.center.z = obj.size.z / 2.0;
    bool moving = rng.uniform() < cfg.moving_fraction;
    obj.yaw = rng.uniform(0, 2.0 * M_PI);
    if (moving) {
      double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
      obj.vx = speed * std::cos(obj.yaw);
      obj.vy = speed * std::sin(obj.yaw);
    }
    seq.objects.push_back(obj);
  }
  return seq;
}

// Ground-truth boxes at a sweep, expressed in that sweep's lidar frame.
// Objects whose center leaves the ROI are dropped.
inline std::vector<GtBox> gt_boxes(const SceneSequence& seq, int sweep, const Roi& roi) {
  auto global_to_lidar = seq.lidar_to_global(sweep).inverse();
  double heading_cos = seq.ego_to_global[static_cast<size_t>(sweep)](0, 0);
  double heading_sin = seq.ego_to_global[static_cast<size_t>(sweep)](1, 0);
  double heading = std::atan2(heading_sin, heading_cos);
  double t = seq.timestamps[static_cast<size_t>(sweep)];
  std::vector<GtBox> out;
  for (const auto& obj : seq.objects) {
    GtBox g;
    g.cls = obj.cls;
    g.center = global_to_lidar.apply(obj.center_at(t));
    if (!roi.contains(g.center)) continue;
    g.size = obj.size;
    g.yaw = obj.yaw - heading;
    double c = std::cos(-heading), s = std::sin(-heading);
    g.vx = c * obj.vx - s * obj.vy;
    g.vy = s * obj.vx + c * obj.vy;
    out.push_back(g);
  }
  return out;
}

namespace detail {

struct HullPoint {
  double x, y;
};

// Andrew monotone chain; returns CCW hull.
inline std::vector<HullPoint> convex_hull(std::vector<HullPoint> pts) {
  std::sort(pts.begin(), pts.end(), [](const HullPoint& a, const HullPoint& b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const HullPoint& a, const HullPoint& b) {
                          return a.x == b.x && a.y == b.y;
                        }),
            pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const HullPoint& o, const HullPoint& a, const HullPoint& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  };
  std::vector<HullPoint> hull(2 * pts.size());
  size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (size_t i = pts.size() - 1, lo = k + 1; i-- > 0;) {
    while (k >= lo && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

inline void fill_hull(std::vector<uint8_t>& img, int w, int h, const std::vector<HullPoint>& hull,
                      uint8_t value) {
  if (hull.size() < 3) return;
  double ymin = 1e300, ymax = -1e300;
  for (const auto& p : hull) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  int y0 = std::max(0, static_cast<int>(std::floor(ymin)));
  int y1 = std::min(h - 1, static_cast<int>(std::ceil(ymax)));
  for (int py = y0; py <= y1; ++py) {
    double yc = py + 0.5;
    std::vector<double> xs;
    size_t n = hull.size();
    for (size_t i = 0; i < n; ++i) {
      const auto& a = hull[i];
      const auto& b = hull[(i + 1) % n];
      if ((a.y <= yc && b.y > yc) || (b.y <= yc && a.y > yc)) {
        double frac = (yc - a.y) / (b.y - a.y);
        xs.push_back(a.x + frac * (b.x - a.x));
      }
    }
    std::sort(xs.begin(), xs.end());
    for (size_t i = 0; i + 1 < xs.size(); i += 2) {
      int x0 = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5)));
      int x1 = std::min(w - 1, static_cast<int>(std::floor(xs[i + 1] - 0.5)));
      for (int px = x0; px <= x1; ++px) img[static_cast<size_t>(py) * w + px] = value;
    }
  }
}

inline std::array<Vec3, 8> box_corners(const Vec3& center, const Vec3& size, double yaw) {
  std::array<Vec3, 8> out;
  double c = std::cos(yaw), s = std::sin(yaw);
  int at = 0;
  for (int dl = -1; dl <= 1; dl += 2)
    for (int dw = -1; dw <= 1; dw += 2)
      for (int dh = -1; dh <= 1; dh += 2) {
        double lx = dl * size.y / 2.0;  // along heading
        double wy = dw * size.x / 2.0;  // across
        out[static_cast<size_t>(at++)] = {center.x + c * lx - s * wy, center.y + s * lx + c * wy,
                                          center.z + dh * size.z / 2.0};
      }
  return out;
}

}  // namespace detail

// Rasterized silhouette views at one sweep. Objects are painted far-to-near
// by center depth with class-coded intensity.
inline std::vector<PgmImage> render_views(const SceneSequence& seq, int sweep,
                                          const CameraRig& rig) {
  if (sweep < 0 || sweep >= seq.sweeps())
    throw std::invalid_argument("render_views: sweep index out of range");
  double t = seq.timestamps[static_cast<size_t>(sweep)];
  auto global_to_lidar = seq.lidar_to_global(sweep).inverse();
  std::vector<PgmImage> views;
  for (int cam = 0; cam < rig.cameras(); ++cam) {
    PgmImage img;
    img.width = rig.img_w;
    img.height = rig.img_h;
    img.pixels.assign(static_cast<size_t>(rig.img_w) * rig.img_h, 0);

    auto lidar_to_cam = rig.cam_to_lidar_t(cam, sweep).inverse();
    const auto& intr = rig.intrinsics[static_cast<size_t>(cam)];

    // far to near
    std::vector<std::pair<double, const SceneObject*>> order;
    for (const auto& obj : seq.objects) {
      Vec3 in_cam = lidar_to_cam.apply(global_to_lidar.apply(obj.center_at(t)));
      if (in_cam.z < 0.5) continue;  // behind or grazing the camera
      order.emplace_back(in_cam.z, &obj);
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });

    for (const auto& [depth, obj] : order) {
      auto corners = detail::box_corners(obj->center_at(t), obj->size, obj->yaw);
      std::vector<detail::HullPoint> projected;
      for (const auto& corner : corners) {
        Vec3 in_cam = lidar_to_cam.apply(global_to_lidar.apply(corner));
        double z = std::max(in_cam.z, 0.15);  // clamp grazing corners
        auto uvd = intr.project({in_cam.x, in_cam.y, z});
        projected.push_back({uvd[0], uvd[1]});
      }
      auto hull = detail::convex_hull(projected);
      detail::fill_hull(img.pixels, img.width, img.height, hull,
                        static_cast<uint8_t>(class_intensity(obj->cls)));
    }
    views.push_back(std::move(img));
  }
  return views;
}

namespace detail {

inline double dist_to_polyline(double px, double py, const std::vector<HullPoint>& line) {
  double best = 1e300;
  for (size_t i = 0; i + 1 < line.size(); ++i) {
    double ax = line[i].x, ay = line[i].y;
    double bx = line[i + 1].x, by = line[i + 1].y;
    double dx = bx - ax, dy = by - ay;
    double len2 = dx * dx + dy * dy;
    double u = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
    double cx = ax + u * dx - px, cy = ay + u * dy - py;
    best = std::min(best, cx * cx + cy * cy);
  }
  return std::sqrt(best);
}

}  // namespace detail

// Binary BEV ground truth at a sweep: drivable road band and lane lines are
// procedural ribbons along the ego trajectory; the vehicle channel is the
// union of box footprints. Pixel (r, c) covers
//   x = roi.x_min + (r + 0.5) * dx,  y = roi.y_min + (c + 0.5) * dy
// in the sweep's lidar frame.
inline BEVMap bev_gt(const SceneSequence& seq, int sweep, int map_size, const Roi& roi,
                     const SceneConfig& cfg) {
  if (sweep < 0 || sweep >= seq.sweeps())
    throw std::invalid_argument("bev_gt: sweep index out of range");
  roi.validate();
  double t = seq.timestamps[static_cast<size_t>(sweep)];
  auto global_to_lidar = seq.lidar_to_global(sweep).inverse();

  // trajectory polyline in this sweep's lidar frame, extended beyond both ends
  std::vector<detail::HullPoint> road;
  {
    auto add = [&](const Vec3& g) {
      Vec3 p = global_to_lidar.apply(g);
      road.push_back({p.x, p.y});
    };
    const auto& first = seq.ego_to_global.front();
    const auto& last = seq.ego_to_global.back();
    Vec3 p0{first(0, 3), first(1, 3), 0}, h0{first(0, 0), first(1, 0), 0};
    Vec3 p1{last(0, 3), last(1, 3), 0}, h1{last(0, 0), last(1, 0), 0};
    add(p0 - h0 * 90.0);
    for (const auto& pose : seq.ego_to_global) add({pose(0, 3), pose(1, 3), 0});
    add(p1 + h1 * 90.0);
  }
  std::vector<double> values(3ull * map_size * map_size, 0.0);
  double dx = (roi.x_max - roi.x_min) / map_size;
  double dy = (roi.y_max - roi.y_min) / map_size;
  int64_t per = static_cast<int64_t>(map_size) * map_size;
  for (int r = 0; r < map_size; ++r) {
    double px = roi.x_min + (r + 0.5) * dx;
    for (int c = 0; c < map_size; ++c) {
      double py = roi.y_min + (c + 0.5) * dy;
      int64_t at = static_cast<int64_t>(r) * map_size + c;
      double droad = detail::dist_to_polyline(px, py, road);
      if (droad <= cfg.road_half_width) values[static_cast<size_t>(at)] = 1.0;  // drivable
      // lane lines sit at symmetric lateral offsets, so they are bands of the
      // unsigned road-distance field
      for (double off : cfg.lane_offsets)
        if (std::fabs(droad - std::fabs(off)) <= cfg.lane_half_width) {
          values[static_cast<size_t>(per + at)] = 1.0;  // lane
          break;
        }
    }
  }

  // vehicle footprints: rotated-rectangle point test over each box's pixel bbox
  for (const auto& obj : seq.objects) {
    Vec3 center = global_to_lidar.apply(obj.center_at(t));
    double heading = std::atan2(seq.ego_to_global[static_cast<size_t>(sweep)](1, 0),
                                seq.ego_to_global[static_cast<size_t>(sweep)](0, 0));
    double yaw = obj.yaw - heading;
    double half_diag = 0.5 * std::sqrt(obj.size.x * obj.size.x + obj.size.y * obj.size.y);
    int r0 = std::max(0, static_cast<int>((center.x - half_diag - roi.x_min) / dx) - 1);
    int r1 = std::min(map_size - 1, static_cast<int>((center.x + half_diag - roi.x_min) / dx) + 1);
    int c0 = std::max(0, static_cast<int>((center.y - half_diag - roi.y_min) / dy) - 1);
    int c1 = std::min(map_size - 1, static_cast<int>((center.y + half_diag - roi.y_min) / dy) + 1);
    double cs = std::cos(-yaw), sn = std::sin(-yaw);
    for (int r = r0; r <= r1; ++r) {
      double px = roi.x_min + (r + 0.5) * dx - center.x;
      for (int c = c0; c <= c1; ++c) {
        double py = roi.y_min + (c + 0.5) * dy - center.y;
        double lx = cs * px - sn * py;  // into the box's local frame
        double ly = sn * px + cs * py;
        if (std::fabs(lx) <= obj.size.y / 2.0 && std::fabs(ly) <= obj.size.x / 2.0)
          values[static_cast<size_t>(2 * per + static_cast<int64_t>(r) * map_size + c)] = 1.0;
      }
    }
  }

  BEVMap out;
  out.values = ad::Tensor::constant({3, map_size, map_size}, std::move(values));
  out.classes = default_bev_classes();
  return out;
}

struct PrevFrameChoice {
  int prev_idx = 0;
  bool clamped = false;
};

enum class SampleMode { train, infer };

// Previous-frame pick: training draws the offset uniformly from [3, 27]
// sweeps, inference uses exactly 15. Out-of-range picks clamp to sweep 0.
inline PrevFrameChoice sample_prev_frame(const SceneSequence& seq, int t_idx, SampleMode mode,
                                         Rng& rng) {
  if (t_idx < 0 || t_idx >= seq.sweeps())
    throw std::invalid_argument("sample_prev_frame: sweep index out of range");
  int offset = mode == SampleMode::train ? static_cast<int>(rng.uniform_int(3, 27)) : 15;
  PrevFrameChoice out;
  out.prev_idx = t_idx - offset;
  if (out.prev_idx < 0) {
    out.prev_idx = 0;
    out.clamped = true;
  }
  return out;
}

}  // namespace mv3d
