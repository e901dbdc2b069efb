// Detection and segmentation metrics.
//
// Average precision uses greedy score-ordered matching by BEV center
// distance at thresholds {0.5, 1, 2, 4} m with 41-point interpolation of the
// precision/recall curve. True-positive errors (translation, velocity,
// orientation) come from the 2 m matching. The composite score is the
// documented affine combination
//   (1/6) * (3*mAP + sum over {mATE/2, mAVE/2, mAOE/(pi/2)} of (1 - min(1, e)))
// which mirrors the detection-score style of driving benchmarks but is not
// numerically comparable to any of them (scale and attribute errors are
// absent here).
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "mv3d/heads.hpp"

namespace mv3d {

// Predictions and ground truth for one evaluated keyframe.
struct DetFrame {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
};

struct TpErrors {
  double mate = -1, mave = -1, maoe = -1;  // -1 = no matches (sentinel)
  int matched = 0;
};

struct EvalResult {
  static constexpr std::array<double, 4> kThresholds{0.5, 1.0, 2.0, 4.0};
  // ap[cls][thr]; -1 when the class has no ground truth anywhere
  std::vector<std::array<double, 4>> ap;
  double mean_ap = 0;
  TpErrors tp;
  double composite = 0;
  std::vector<double> bev_iou;          // per segmentation class, -1 if absent
  std::vector<uint8_t> bev_iou_empty;   // 1 when the union was empty (IoU forced to 1)
};

namespace detail {

inline double bev_dist(const Detection& d, const GtBox& g) {
  double dx = d.center.x - g.center.x, dy = d.center.y - g.center.y;
  return std::sqrt(dx * dx + dy * dy);
}

struct RankedPred {
  double score;
  int frame, idx;
};

// Greedy score-ordered matching for one class at one distance threshold.
// Returns (pred frame, pred idx, gt idx) triples; ties in score break by
// (frame, idx) so results are deterministic.
inline std::vector<std::array<int, 3>> greedy_match(const std::vector<DetFrame>& frames, int cls,
                                                    double threshold) {
  std::vector<RankedPred> ranked;
  for (int f = 0; f < static_cast<int>(frames.size()); ++f)
    for (int i = 0; i < static_cast<int>(frames[static_cast<size_t>(f)].dets.size()); ++i)
      if (frames[static_cast<size_t>(f)].dets[static_cast<size_t>(i)].cls == cls)
        ranked.push_back({frames[static_cast<size_t>(f)].dets[static_cast<size_t>(i)].score, f, i});
  std::sort(ranked.begin(), ranked.end(), [](const RankedPred& a, const RankedPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.idx < b.idx;
  });
  std::vector<std::vector<char>> taken(frames.size());
  for (size_t f = 0; f < frames.size(); ++f) taken[f].assign(frames[f].gts.size(), 0);
  std::vector<std::array<int, 3>> matches;
  for (const auto& r : ranked) {
    const auto& fr = frames[static_cast<size_t>(r.frame)];
    const auto& det = fr.dets[static_cast<size_t>(r.idx)];
    int best = -1;
    double best_d = threshold;
    for (int g = 0; g < static_cast<int>(fr.gts.size()); ++g) {
      if (taken[static_cast<size_t>(r.frame)][static_cast<size_t>(g)]) continue;
      if (fr.gts[static_cast<size_t>(g)].cls != cls) continue;
      double dist = bev_dist(det, fr.gts[static_cast<size_t>(g)]);
      if (dist <= best_d) {
        best_d = dist;
        best = g;
      }
    }
    if (best >= 0) {
      taken[static_cast<size_t>(r.frame)][static_cast<size_t>(best)] = 1;
      matches.push_back({r.frame, r.idx, best});
    }
  }
  return matches;
}

// AP for one class at one threshold via 41-point interpolation.
inline double average_precision(const std::vector<DetFrame>& frames, int cls, double threshold,
                                int64_t n_pos) {
  if (n_pos == 0) return -1;
  std::vector<RankedPred> ranked;
  for (int f = 0; f < static_cast<int>(frames.size()); ++f)
    for (int i = 0; i < static_cast<int>(frames[static_cast<size_t>(f)].dets.size()); ++i)
      if (frames[static_cast<size_t>(f)].dets[static_cast<size_t>(i)].cls == cls)
        ranked.push_back({frames[static_cast<size_t>(f)].dets[static_cast<size_t>(i)].score, f, i});
  std::sort(ranked.begin(), ranked.end(), [](const RankedPred& a, const RankedPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.idx < b.idx;
  });
  std::vector<std::vector<char>> taken(frames.size());
  for (size_t f = 0; f < frames.size(); ++f) taken[f].assign(frames[f].gts.size(), 0);
  std::vector<char> is_tp(ranked.size(), 0);
  for (size_t k = 0; k < ranked.size(); ++k) {
    const auto& r = ranked[k];
    const auto& fr = frames[static_cast<size_t>(r.frame)];
    int best = -1;
    double best_d = threshold;
    for (int g = 0; g < static_cast<int>(fr.gts.size()); ++g) {
      if (taken[static_cast<size_t>(r.frame)][static_cast<size_t>(g)]) continue;
      if (fr.gts[static_cast<size_t>(g)].cls != cls) continue;
      double dist = bev_dist(fr.dets[static_cast<size_t>(r.idx)], fr.gts[static_cast<size_t>(g)]);
      if (dist <= best_d) {
        best_d = dist;
        best = g;
      }
    }
    if (best >= 0) {
      taken[static_cast<size_t>(r.frame)][static_cast<size_t>(best)] = 1;
      is_tp[k] = 1;
    }
  }
  // precision/recall points, then 41-point interpolated area
  std::vector<double> precision, recall;
  int64_t tp = 0;
  for (size_t k = 0; k < ranked.size(); ++k) {
    if (is_tp[k]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_pos));
  }
  double ap = 0;
  for (int i = 0; i <= 40; ++i) {
    double r_level = i / 40.0;
    double best_p = 0;
    for (size_t k = 0; k < precision.size(); ++k)
      if (recall[k] >= r_level) best_p = std::max(best_p, precision[k]);
    ap += best_p;
  }
  return ap / 41.0;
}

}  // namespace detail

// Per-class, per-threshold average precision; the mean skips classes with no
// ground truth.
inline EvalResult detection_metrics(const std::vector<DetFrame>& frames, int n_cls) {
  EvalResult out;
  out.ap.assign(static_cast<size_t>(n_cls), {0, 0, 0, 0});
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < n_cls; ++c) {
    int64_t n_pos = 0;
    for (const auto& f : frames)
      for (const auto& g : f.gts)
        if (g.cls == c) ++n_pos;
    for (size_t t = 0; t < EvalResult::kThresholds.size(); ++t) {
      double ap = detail::average_precision(frames, c, EvalResult::kThresholds[t], n_pos);
      out.ap[static_cast<size_t>(c)][t] = ap;
      if (ap >= 0) {
        sum += ap;
        ++counted;
      }
    }
  }
  out.mean_ap = counted > 0 ? sum / counted : 0.0;

  // TP errors from the 2 m matching
  double ate = 0, ave = 0, aoe = 0;
  int matched = 0;
  for (int c = 0; c < n_cls; ++c) {
    auto matches = detail::greedy_match(frames, c, 2.0);
    for (const auto& m : matches) {
      const auto& det = frames[static_cast<size_t>(m[0])].dets[static_cast<size_t>(m[1])];
      const auto& gt = frames[static_cast<size_t>(m[0])].gts[static_cast<size_t>(m[2])];
      ate += detail::bev_dist(det, gt);
      double dvx = det.vx - gt.vx, dvy = det.vy - gt.vy;
      ave += std::sqrt(dvx * dvx + dvy * dvy);
      double dyaw = std::fmod(std::fabs(det.yaw - gt.yaw), 2.0 * M_PI);
      if (dyaw > M_PI) dyaw = 2.0 * M_PI - dyaw;
      aoe += dyaw;
      ++matched;
    }
  }
  if (matched > 0) {
    out.tp.mate = ate / matched;
    out.tp.mave = ave / matched;
    out.tp.maoe = aoe / matched;
    out.tp.matched = matched;
  }

  double tp_score = 0;
  if (matched > 0) {
    tp_score += 1.0 - std::min(1.0, out.tp.mate / 2.0);
    tp_score += 1.0 - std::min(1.0, out.tp.mave / 2.0);
    tp_score += 1.0 - std::min(1.0, out.tp.maoe / (M_PI / 2.0));
  }
  out.composite = (3.0 * out.mean_ap + tp_score) / 6.0;
  return out;
}

// Pairwise true-positive errors on externally supplied matches (exposed for
// oracle-style evaluations).
inline TpErrors tp_errors(const std::vector<std::pair<Detection, GtBox>>& pairs) {
  TpErrors out;
  if (pairs.empty()) return out;
  double ate = 0, ave = 0, aoe = 0;
  for (const auto& [det, gt] : pairs) {
    ate += detail::bev_dist(det, gt);
    double dvx = det.vx - gt.vx, dvy = det.vy - gt.vy;
    ave += std::sqrt(dvx * dvx + dvy * dvy);
    double dyaw = std::fmod(std::fabs(det.yaw - gt.yaw), 2.0 * M_PI);
    if (dyaw > M_PI) dyaw = 2.0 * M_PI - dyaw;
    aoe += dyaw;
  }
  out.matched = static_cast<int>(pairs.size());
  out.mate = ate / out.matched;
  out.mave = ave / out.matched;
  out.maoe = aoe / out.matched;
  return out;
}

// Per-class IoU of a thresholded prediction against binary ground truth.
// A class whose union is empty reports 1.0 with the empty flag set.
struct BevIouResult {
  std::vector<double> iou;
  std::vector<uint8_t> empty_union;
};

inline BevIouResult bev_iou(const BEVMap& pred, const BEVMap& gt, double threshold = 0.5) {
  if (pred.values.shape != gt.values.shape)
    throw std::invalid_argument("bev_iou: map shapes differ");
  int n_cls = pred.values.shape[0];
  int64_t per = static_cast<int64_t>(pred.values.shape[1]) * pred.values.shape[2];
  BevIouResult out;
  for (int c = 0; c < n_cls; ++c) {
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < per; ++i) {
      bool p = pred.values[c * per + i] >= threshold;
      bool g = gt.values[c * per + i] == 1.0;
      inter += (p && g) ? 1 : 0;
      uni += (p || g) ? 1 : 0;
    }
    out.iou.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
    out.empty_union.push_back(uni == 0 ? 1 : 0);
  }
  return out;
}

// Streaming accumulator for IoU over many frames (counts, not averages).
struct BevIouAccumulator {
  std::vector<int64_t> inter, uni;

  void add(const BEVMap& pred, const BEVMap& gt, double threshold = 0.5) {
    int n_cls = pred.values.shape[0];
    if (inter.empty()) {
      inter.assign(static_cast<size_t>(n_cls), 0);
      uni.assign(static_cast<size_t>(n_cls), 0);
    }
    int64_t per = static_cast<int64_t>(pred.values.shape[1]) * pred.values.shape[2];
    for (int c = 0; c < n_cls; ++c)
      for (int64_t i = 0; i < per; ++i) {
        bool p = pred.values[c * per + i] >= threshold;
        bool g = gt.values[c * per + i] == 1.0;
        inter[static_cast<size_t>(c)] += (p && g) ? 1 : 0;
        uni[static_cast<size_t>(c)] += (p || g) ? 1 : 0;
      }
  }

  std::vector<double> result() const {
    std::vector<double> out;
    for (size_t c = 0; c < inter.size(); ++c)
      out.push_back(uni[c] == 0 ? 1.0 : static_cast<double>(inter[c]) / static_cast<double>(uni[c]));
    return out;
  }
};

}  // namespace mv3d
