// Detection / segmentation heads, losses, and label assignment costs.
//
// Box encoding (10 dims): center xyz, size whl, yaw as (sin, cos), velocity
// (vx, vy). Regression works in a normalized target space:
//   dims 0-2  center mapped to [0,1]^3 over the ROI (sigmoid decode)
//   dims 3-5  log size (exp decode, so decoded sizes are positive)
//   dims 6-7  raw (sin, cos)
//   dims 8-9  velocity / v_max
// The decoded-meters form is carried alongside for consumers.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/geometry.hpp"
#include "mv3d/hungarian.hpp"
#include "mv3d/nn.hpp"
#include "mv3d/tensor.hpp"

namespace mv3d {

struct GtBox {
  int cls = 0;
  Vec3 center;  // lidar frame, meters
  Vec3 size;    // w, l, h meters
  double yaw = 0;
  double vx = 0, vy = 0;  // lidar frame, m/s
};

struct Detection {
  int cls = 0;
  double score = 0;
  Vec3 center;
  Vec3 size;
  double yaw = 0;
  double vx = 0, vy = 0;
};

struct LossWeights {
  double det_weight = 1.0;
  double seg_weight = 1.0;

  void validate() const {
    if (det_weight < 0 || seg_weight < 0)
      throw std::invalid_argument("LossWeights: weights must be nonnegative");
  }
};

struct Detection3D {
  ad::Tensor class_logits;  // [N, n_cls]
  ad::Tensor box_norm;      // [N, 10], normalized target space
  ad::Tensor box;           // [N, 10], decoded (meters, sin/cos, m/s)
};

struct DetectionHeadParams {
  int n_cls = 0;
  nn::Mlp2 cls_branch;  // C -> C -> n_cls
  nn::Mlp2 reg_branch;  // C -> C -> 10
};

inline DetectionHeadParams add_detection_head(ad::ParamStore& store, const std::string& prefix,
                                              int c, int n_cls, Rng& rng) {
  DetectionHeadParams p;
  p.n_cls = n_cls;
  p.cls_branch = nn::add_mlp2(store, prefix + ".cls", c, c, n_cls, rng);
  p.reg_branch = nn::add_mlp2(store, prefix + ".reg", c, c, 10, rng);
  return p;
}

namespace detail {

inline ad::Tensor inverse_sigmoid(const ad::Tensor& p) {
  auto pc = ad::clamp(p, 1e-6, 1.0 - 1e-6);
  return ad::sub(ad::log(pc), ad::log(ad::affine(pc, -1.0, 1.0)));
}

}  // namespace detail

// Two parallel MLP branches. The center is decoded relative to the query's
// anchor point (sigmoid of raw offset plus the anchor's logit).
inline Detection3D detection_head(ad::Tape& tape, const ad::Tensor& det_embeds,
                                  const ad::Tensor& anchors, const DetectionHeadParams& params,
                                  const Roi& roi, double v_max) {
  int n = det_embeds.shape[0];
  Detection3D out;
  out.class_logits = nn::apply_mlp2(tape, params.cls_branch, det_embeds);
  auto reg = nn::apply_mlp2(tape, params.reg_branch, det_embeds);
  auto center01 =
      ad::sigmoid(ad::add(ad::slice(reg, {0, 0}, {n, 3}), detail::inverse_sigmoid(anchors)));
  auto log_size = ad::slice(reg, {0, 3}, {n, 6});
  auto yaw_sc = ad::slice(reg, {0, 6}, {n, 8});
  auto vel_n = ad::slice(reg, {0, 8}, {n, 10});
  out.box_norm = ad::concat({center01, log_size, yaw_sc, vel_n}, 1);

  auto extent = ad::Tensor::constant({3}, {roi.x_max - roi.x_min, roi.y_max - roi.y_min,
                                           roi.z_max - roi.z_min});
  auto origin = ad::Tensor::constant({3}, {roi.x_min, roi.y_min, roi.z_min});
  auto center_m = ad::add(ad::mul(center01, extent), origin);
  auto size_m = ad::exp(log_size);
  auto vel_m = ad::affine(vel_n, v_max, 0.0);
  out.box = ad::concat({center_m, size_m, yaw_sc, vel_m}, 1);
  return out;
}

// Host-side view of decoded detections, one per query, class = argmax prob.
inline std::vector<Detection> decode_detections(const Detection3D& d, double score_threshold) {
  int n = d.class_logits.shape[0], n_cls = d.class_logits.shape[1];
  std::vector<Detection> out;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double best_logit = d.class_logits[static_cast<int64_t>(i) * n_cls];
    for (int c = 1; c < n_cls; ++c) {
      double l = d.class_logits[static_cast<int64_t>(i) * n_cls + c];
      if (l > best_logit) {
        best_logit = l;
        best = c;
      }
    }
    double score = 1.0 / (1.0 + std::exp(-best_logit));
    if (score < score_threshold) continue;
    const double* b = d.box.ptr() + static_cast<int64_t>(i) * 10;
    Detection det;
    det.cls = best;
    det.score = score;
    det.center = {b[0], b[1], b[2]};
    det.size = {b[3], b[4], b[5]};
    det.yaw = std::atan2(b[6], b[7]);
    det.vx = b[8];
    det.vy = b[9];
    out.push_back(det);
  }
  return out;
}

// ---------------------------------------------------------------------------
// BEV segmentation head

// Rasterized BEV map: predictions in [0,1], ground truth binary.
struct BEVMap {
  ad::Tensor values;  // [n_cls, H, W]
  std::vector<std::string> classes;
};

inline const std::vector<std::string>& default_bev_classes() {
  static const std::vector<std::string> k = {"drivable", "lane", "vehicle"};
  return k;
}

struct SegmentationHeadParams {
  int patch_h = 0, patch_w = 0, map_size = 0, n_cls = 0;
  nn::Mlp2 out;  // C -> C -> n_cls*patch_h*patch_w
};

inline SegmentationHeadParams add_segmentation_head(ad::ParamStore& store,
                                                    const std::string& prefix, int c, int n_cls,
                                                    int patch_h, int patch_w, int map_size,
                                                    Rng& rng) {
  if (patch_h < 1 || patch_w < 1 || map_size % patch_h != 0 || map_size % patch_w != 0)
    throw std::invalid_argument("segmentation head: patch dims must divide the map size");
  SegmentationHeadParams p;
  p.patch_h = patch_h;
  p.patch_w = patch_w;
  p.map_size = map_size;
  p.n_cls = n_cls;
  p.out = nn::add_mlp2(store, prefix + ".out", c, c, n_cls * patch_h * patch_w, rng);
  return p;
}

// Places per-query patch rows [Nq, n_cls*ph*pw] (queries in row-major patch
// order) into a full [n_cls, map, map] image. Pure data movement.
inline ad::Tensor assemble_patches(const ad::Tensor& rows, int n_cls, int patch_h, int patch_w,
                                   int map_size) {
  int gh = map_size / patch_h, gw = map_size / patch_w;
  if (rows.rank() != 2 || rows.shape[0] != gh * gw || rows.shape[1] != n_cls * patch_h * patch_w)
    throw std::invalid_argument("assemble_patches: rows shape " + ad::shape_str(rows.shape) +
                                " does not tile a " + std::to_string(map_size) + " map");
  auto grid = ad::reshape(rows, {gh, gw, n_cls, patch_h, patch_w});
  auto ordered = ad::permute(grid, {2, 0, 3, 1, 4});  // [n_cls, gh, ph, gw, pw]
  return ad::reshape(ordered, {n_cls, map_size, map_size});
}

// Inverse of assemble_patches.
inline ad::Tensor partition_patches(const ad::Tensor& map, int patch_h, int patch_w) {
  if (map.rank() != 3) throw std::invalid_argument("partition_patches: expects [n_cls, H, W]");
  int n_cls = map.shape[0], h = map.shape[1], w = map.shape[2];
  if (h % patch_h != 0 || w % patch_w != 0)
    throw std::invalid_argument("partition_patches: patch dims must divide the map");
  int gh = h / patch_h, gw = w / patch_w;
  auto grid = ad::reshape(map, {n_cls, gh, patch_h, gw, patch_w});
  auto ordered = ad::permute(grid, {1, 3, 0, 2, 4});  // [gh, gw, n_cls, ph, pw]
  return ad::reshape(ordered, {gh * gw, n_cls * patch_h * patch_w});
}

inline BEVMap segmentation_head(ad::Tape& tape, const ad::Tensor& seg_embeds,
                                const SegmentationHeadParams& params) {
  auto rows = ad::sigmoid(nn::apply_mlp2(tape, params.out, seg_embeds));
  BEVMap out;
  out.values = assemble_patches(rows, params.n_cls, params.patch_h, params.patch_w, params.map_size);
  out.classes = default_bev_classes();
  out.classes.resize(static_cast<size_t>(params.n_cls));
  return out;
}

// ---------------------------------------------------------------------------
// Losses

// Weighted binary cross-entropy over the BEV map. Per class,
// omega_c = min(N_neg / N_pos, omega_max) computed from the ground truth
// (omega_max also covers classes with no positive pixel). The loss is
//   -(1 / (N*C)) * sum_c sum_i [ omega_c * y_hat * log y + (1 - y_hat) * log(1 - y) ]
// with predictions clamped to [1e-7, 1 - 1e-7].
inline ad::Tensor weighted_ce_loss(ad::Tape& tape, const BEVMap& pred, const BEVMap& gt,
                                   double omega_max = 100.0) {
  (void)tape;
  if (pred.values.shape != gt.values.shape)
    throw std::invalid_argument("weighted_ce_loss: prediction and ground truth shapes differ");
  int n_cls = pred.values.shape[0];
  int64_t per_class = static_cast<int64_t>(pred.values.shape[1]) * pred.values.shape[2];
  std::vector<double> pos_w(static_cast<size_t>(gt.values.size()));
  std::vector<double> neg_w(static_cast<size_t>(gt.values.size()));
  for (int c = 0; c < n_cls; ++c) {
    int64_t pos = 0;
    for (int64_t i = 0; i < per_class; ++i) {
      double v = gt.values[c * per_class + i];
      if (v != 0.0 && v != 1.0)
        throw std::invalid_argument("weighted_ce_loss: ground truth must be binary");
      if (v == 1.0) ++pos;
    }
    double omega = pos == 0 ? omega_max
                            : std::min(static_cast<double>(per_class - pos) / static_cast<double>(pos),
                                       omega_max);
    for (int64_t i = 0; i < per_class; ++i) {
      double v = gt.values[c * per_class + i];
      pos_w[static_cast<size_t>(c * per_class + i)] = v == 1.0 ? omega : 0.0;
      neg_w[static_cast<size_t>(c * per_class + i)] = v == 1.0 ? 0.0 : 1.0;
    }
  }
  auto y = ad::clamp(pred.values, 1e-7, 1.0 - 1e-7);
  auto pos_t = ad::Tensor::constant(pred.values.shape, std::move(pos_w));
  auto neg_t = ad::Tensor::constant(pred.values.shape, std::move(neg_w));
  auto term = ad::add(ad::mul(pos_t, ad::log(y)), ad::mul(neg_t, ad::log(ad::affine(y, -1.0, 1.0))));
  double scale = -1.0 / static_cast<double>(per_class * n_cls);
  return ad::affine(ad::reduce_sum(term), scale, 0.0);
}

// Per-class sigmoid focal loss, mean over queries. targets[i] in [0, n_cls)
// or -1 for background.
inline ad::Tensor focal_loss(ad::Tape& tape, const ad::Tensor& class_logits,
                             const std::vector<int>& targets, double gamma, double alpha) {
  (void)tape;
  int n = class_logits.shape[0], n_cls = class_logits.shape[1];
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("focal_loss: targets length != number of queries");
  std::vector<double> onehot(static_cast<size_t>(n) * n_cls, 0.0);
  for (int i = 0; i < n; ++i) {
    if (targets[static_cast<size_t>(i)] < -1 || targets[static_cast<size_t>(i)] >= n_cls)
      throw std::invalid_argument("focal_loss: invalid class index " +
                                  std::to_string(targets[static_cast<size_t>(i)]));
    if (targets[static_cast<size_t>(i)] >= 0)
      onehot[static_cast<size_t>(i) * n_cls + targets[static_cast<size_t>(i)]] = 1.0;
  }
  auto t = ad::Tensor::constant(class_logits.shape, std::move(onehot));
  auto p = ad::clamp(ad::sigmoid(class_logits), 1e-7, 1.0 - 1e-7);
  auto one_minus_p = ad::affine(p, -1.0, 1.0);
  auto pos = ad::mul(t, ad::mul(ad::power(one_minus_p, gamma), ad::affine(ad::log(p), -alpha, 0.0)));
  auto neg = ad::mul(ad::affine(t, -1.0, 1.0),
                     ad::mul(ad::power(p, gamma), ad::affine(ad::log(one_minus_p), -(1.0 - alpha), 0.0)));
  return ad::affine(ad::reduce_sum(ad::add(pos, neg)), 1.0 / static_cast<double>(n), 0.0);
}

inline std::array<double, 10> normalize_gt_box(const GtBox& g, const Roi& roi, double v_max) {
  return {(g.center.x - roi.x_min) / (roi.x_max - roi.x_min),
          (g.center.y - roi.y_min) / (roi.y_max - roi.y_min),
          (g.center.z - roi.z_min) / (roi.z_max - roi.z_min),
          std::log(g.size.x),
          std::log(g.size.y),
          std::log(g.size.z),
          std::sin(g.yaw),
          std::cos(g.yaw),
          g.vx / v_max,
          g.vy / v_max};
}

// Mean absolute error over matched pairs and the 10 normalized box dims.
// An empty assignment contributes a constant 0 (nothing to regress).
inline ad::Tensor l1_box_loss(ad::Tape& tape, const ad::Tensor& box_norm,
                              const std::vector<GtBox>& gts, const Assignment& assignment,
                              const Roi& roi, double v_max) {
  (void)tape;
  if (assignment.pairs.empty()) return ad::Tensor::constant({}, {0.0});
  std::vector<int> rows;
  std::vector<double> gt_rows;
  for (auto [pi, gi] : assignment.pairs) {
    if (gi < 0 || gi >= static_cast<int>(gts.size()))
      throw std::invalid_argument("l1_box_loss: assignment references missing ground truth");
    rows.push_back(pi);
    auto nb = normalize_gt_box(gts[static_cast<size_t>(gi)], roi, v_max);
    gt_rows.insert(gt_rows.end(), nb.begin(), nb.end());
  }
  auto pred = ad::gather_rows(box_norm, rows);
  auto gt = ad::Tensor::constant({static_cast<int>(assignment.pairs.size()), 10}, std::move(gt_rows));
  auto diff = ad::sub(pred, gt);
  auto abs = ad::add(ad::relu(diff), ad::relu(ad::affine(diff, -1.0, 0.0)));
  return ad::reduce_mean(abs);
}

// DETR-style assignment cost: lambda_cls * (-p[class]) + lambda_box * mean
// absolute difference of the 10 normalized box dims. Host-side, no gradients.
inline CostMatrix match_cost(const Detection3D& dets, const std::vector<GtBox>& gts, const Roi& roi,
                             double v_max, double lambda_cls = 1.0, double lambda_box = 5.0) {
  if (gts.empty()) throw std::invalid_argument("match_cost: needs at least one ground truth");
  int n = dets.class_logits.shape[0], n_cls = dets.class_logits.shape[1];
  CostMatrix cost;
  cost.rows = n;
  cost.cols = static_cast<int>(gts.size());
  cost.v.resize(static_cast<size_t>(n) * gts.size());
  std::vector<std::array<double, 10>> gt_norm;
  for (const auto& g : gts) gt_norm.push_back(normalize_gt_box(g, roi, v_max));
  for (int i = 0; i < n; ++i) {
    const double* bn = dets.box_norm.ptr() + static_cast<int64_t>(i) * 10;
    for (int j = 0; j < cost.cols; ++j) {
      int cls = gts[static_cast<size_t>(j)].cls;
      if (cls < 0 || cls >= n_cls) throw std::invalid_argument("match_cost: gt class out of range");
      double logit = dets.class_logits[static_cast<int64_t>(i) * n_cls + cls];
      double p = 1.0 / (1.0 + std::exp(-logit));
      double l1 = 0;
      for (int d = 0; d < 10; ++d) l1 += std::fabs(bn[d] - gt_norm[static_cast<size_t>(j)][d]);
      cost.at(i, j) = lambda_cls * (-p) + lambda_box * (l1 / 10.0);
    }
  }
  return cost;
}

}  // namespace mv3d
