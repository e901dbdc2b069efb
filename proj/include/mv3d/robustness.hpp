// Sensor-error protocols and the sweep harness.
//
// Three error kinds: extrinsics rotation noise on one randomly chosen camera
// (per-axis angles uniform in [-R_max, R_max] degrees, composed Rz*Ry*Rx onto
// the camera-to-lidar rotation, translation untouched), camera miss (tokens
// removed, or zero-filled in the redundancy-study mode), and camera time
// delay (images k sweeps stale while poses and annotations stay current; the
// delay applies to both frames of the pair).
//
// During evaluation the extrinsics noise is redrawn per frame from a stream
// seeded by (spec seed, scene id, keyframe), so identical specs give
// identical sweeps.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/report.hpp"
#include "mv3d/scene.hpp"
#include "mv3d/train.hpp"

namespace mv3d {

enum class NoiseKind { none, extrinsics_rotation, camera_miss, time_delay };

inline const char* noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::none: return "none";
    case NoiseKind::extrinsics_rotation: return "extrinsics_rotation";
    case NoiseKind::camera_miss: return "camera_miss";
    case NoiseKind::time_delay: return "time_delay";
  }
  return "?";
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::none;
  double r_max_deg = 0;    // extrinsics_rotation
  int miss_camera = -1;    // camera_miss; -1 draws uniformly per frame
  bool zero_fill = false;  // camera_miss alternative mode
  int delay_sweeps = 0;    // time_delay, in sweep units
  uint64_t seed = 0;

  void validate() const {
    if (r_max_deg < 0) throw std::invalid_argument("NoiseSpec: R_max must be >= 0");
    if (delay_sweeps < 0) throw std::invalid_argument("NoiseSpec: delay must be >= 0");
  }
};

// Rotates exactly one camera's extrinsics; every other camera is returned
// bit-identically. R_max = 0 is the identity.
inline CameraRig perturb_extrinsics(const CameraRig& rig, const NoiseSpec& spec, Rng& rng) {
  if (spec.kind != NoiseKind::extrinsics_rotation)
    throw std::invalid_argument("perturb_extrinsics: spec kind is not extrinsics_rotation");
  if (spec.r_max_deg == 0) return rig;
  CameraRig out = rig;
  int cam = spec.miss_camera;  // reuse field when a fixed camera is wanted
  if (cam < 0) cam = static_cast<int>(rng.uniform_int(0, rig.cameras() - 1));
  double to_rad = M_PI / 180.0;
  double a = rng.uniform(-spec.r_max_deg, spec.r_max_deg) * to_rad;
  double b = rng.uniform(-spec.r_max_deg, spec.r_max_deg) * to_rad;
  double g = rng.uniform(-spec.r_max_deg, spec.r_max_deg) * to_rad;
  auto noise = rot_mul(rot_z(g), rot_mul(rot_y(b), rot_x(a)));
  Mat4& m = out.cam_to_lidar[static_cast<size_t>(cam)];
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[static_cast<size_t>(i * 3 + j)] = m(i, j);
  auto rotated = rot_mul(r, noise);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = rotated[static_cast<size_t>(i * 3 + j)];
  return out;
}

// The sweep the camera pipeline actually observed under a delay of k sweeps.
inline int delayed_sweep(int sweep, int k) { return std::max(0, sweep - k); }

// Geometry-oracle detector: perfect boxes read from the world state the
// (possibly delayed) cameras observed, reported as current-frame output with
// unit confidence. Isolates the kinematics of an error protocol from model
// quality.
inline std::vector<Detection> oracle_detect(const SceneSequence& seq, int sweep, int delay_k,
                                            const Roi& roi) {
  int seen = delayed_sweep(sweep, delay_k);
  auto gts = gt_boxes(seq, seen, roi);
  std::vector<Detection> out;
  for (const auto& g : gts) {
    Detection d;
    d.cls = g.cls;
    d.score = 1.0;
    d.center = g.center;
    d.size = g.size;
    d.yaw = g.yaw;
    d.vx = g.vx;
    d.vy = g.vy;
    out.push_back(d);
  }
  return out;
}

struct SweepRow {
  NoiseSpec spec;
  EvalSummary summary;
};

inline EvalOptions eval_options_for(const NoiseSpec& spec, const EvalOptions& base) {
  spec.validate();
  EvalOptions opt = base;
  switch (spec.kind) {
    case NoiseKind::none:
      break;
    case NoiseKind::extrinsics_rotation:
      opt.rig_provider = [spec](const SceneSequence& seq, int keyframe) {
        Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(seq.scene_id),
                         static_cast<uint64_t>(keyframe)));
        return perturb_extrinsics(seq.rig, spec, rng);
      };
      break;
    case NoiseKind::camera_miss:
      opt.drop_camera = spec.miss_camera;
      opt.zero_fill_drop = spec.zero_fill;
      break;
    case NoiseKind::time_delay:
      opt.delay_sweeps = spec.delay_sweeps;
      break;
  }
  return opt;
}

inline std::string sweep_csv_header() {
  return "kind,r_max,cam_id,delay_k,seed,frames,mAP,composite,mATE,mAVE,mAOE,matched,"
         "iou_drivable,iou_lane,iou_vehicle\n";
}

inline std::string sweep_csv_row(const SweepRow& row) {
  const auto& s = row.summary;
  std::string line = std::string(noise_kind_name(row.spec.kind)) + "," +
                     csv_num(row.spec.r_max_deg) + "," + std::to_string(row.spec.miss_camera) +
                     "," + std::to_string(row.spec.delay_sweeps) + "," +
                     std::to_string(row.spec.seed) + "," + std::to_string(s.frames) + "," +
                     csv_num(s.det.mean_ap) + "," + csv_num(s.det.composite) + "," +
                     csv_num(s.det.tp.mate) + "," + csv_num(s.det.tp.mave) + "," +
                     csv_num(s.det.tp.maoe) + "," + std::to_string(s.det.tp.matched);
  for (int c = 0; c < 3; ++c)
    line += "," + (static_cast<size_t>(c) < s.bev_iou.size() ? csv_num(s.bev_iou[static_cast<size_t>(c)]) : std::string());
  return line + "\n";
}

// Evaluates the model once per spec. The clean spec (kind none) runs the
// exact same path as a direct evaluation.
inline std::vector<SweepRow> robustness_sweep(Model& model,
                                              const std::vector<SceneSequence>& scenes,
                                              const SceneConfig& scene_cfg,
                                              const std::vector<NoiseSpec>& grid,
                                              const EvalOptions& base = {}) {
  std::vector<SweepRow> rows;
  for (const auto& spec : grid) {
    auto opt = eval_options_for(spec, base);
    rows.push_back({spec, evaluate_model(model, scenes, scene_cfg, opt)});
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = sweep_csv_header();
  for (const auto& r : rows) out += sweep_csv_row(r);
  return out;
}

// Line plot (extrinsics / delay grids) or bar plot (camera miss) of the
// sweep, axis fixed to [0, 1].
inline std::string sweep_svg(const std::vector<SweepRow>& rows, NoiseKind kind) {
  if (kind == NoiseKind::camera_miss) {
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& r : rows) {
      labels.push_back(r.spec.kind == NoiseKind::none ? "all"
                                                      : "cam" + std::to_string(r.spec.miss_camera));
      values.push_back(r.summary.det.mean_ap);
    }
    return bar_chart_svg("detection quality when losing one camera", "mAP", labels, values, 0.0,
                         1.0);
  }
  std::vector<double> x;
  Series map_s{"mAP", {}}, comp_s{"composite", {}};
  for (const auto& r : rows) {
    x.push_back(kind == NoiseKind::time_delay ? static_cast<double>(r.spec.delay_sweeps)
                                              : r.spec.r_max_deg);
    map_s.y.push_back(r.summary.det.mean_ap);
    comp_s.y.push_back(r.summary.det.composite);
  }
  const char* xlabel =
      kind == NoiseKind::time_delay ? "delay (sweeps)" : "max rotation noise (degrees)";
  return line_chart_svg("robustness sweep", xlabel, "score", x, {map_s, comp_s}, 0.0, 1.0);
}

}  // namespace mv3d
