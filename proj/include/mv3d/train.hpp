// Training: loss assembly with Hungarian label assignment, SGD with momentum
// and cosine-annealed learning rate, and the sample loop over scene
// keyframes. Evaluation shares the same input pipeline with inference-mode
// previous-frame sampling (offset 15 sweeps).
#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/metrics.hpp"
#include "mv3d/model.hpp"

namespace mv3d {

struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int steps = 400;
  double lr = 2e-3;
  double momentum = 0.9;
  int warmup_steps = 20;
  double grad_clip = 10.0;  // global norm; <= 0 disables
  uint64_t seed = 1;
  LossWeights weights;
};

struct StepLosses {
  double total = 0, focal = 0, l1 = 0, wce = 0;
  int matched = 0;
};

// det_weight * (focal + l1) + seg_weight * weighted CE, with labels assigned
// by minimum-cost matching on the detached outputs.
inline ad::Tensor compute_losses(ad::Tape& tape, const ModelConfig& cfg, const ModelOutputs& out,
                                 const std::vector<GtBox>& gts, const BEVMap& gt_bev,
                                 const LossWeights& weights, StepLosses* breakdown = nullptr) {
  weights.validate();
  std::vector<int> targets(static_cast<size_t>(out.det.class_logits.shape[0]), -1);
  Assignment assignment;
  if (!gts.empty()) {
    auto cost = match_cost(out.det, gts, cfg.roi, cfg.v_max, cfg.lambda_cls, cfg.lambda_box);
    assignment = hungarian_match(cost);
    for (auto [pi, gi] : assignment.pairs) targets[static_cast<size_t>(pi)] = gts[static_cast<size_t>(gi)].cls;
  }
  auto focal = focal_loss(tape, out.det.class_logits, targets, cfg.focal_gamma, cfg.focal_alpha);
  auto l1 = l1_box_loss(tape, out.det.box_norm, gts, assignment, cfg.roi, cfg.v_max);
  auto wce = weighted_ce_loss(tape, out.bev, gt_bev, cfg.omega_max);
  auto det_part = ad::affine(ad::add(focal, l1), weights.det_weight, 0.0);
  auto total = ad::add(det_part, ad::affine(wce, weights.seg_weight, 0.0));
  if (breakdown) {
    breakdown->focal = focal.item();
    breakdown->l1 = l1.item();
    breakdown->wce = wce.item();
    breakdown->total = total.item();
    breakdown->matched = static_cast<int>(assignment.pairs.size());
  }
  return total;
}

class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum) : momentum_(momentum) {}

  void step(ad::ParamStore& store, double lr, double grad_clip) {
    double scale = 1.0;
    if (grad_clip > 0) {
      double norm2 = 0;
      store.for_each([&](ad::Param& p) {
        for (double g : p.grad) norm2 += g * g;
      });
      double norm = std::sqrt(norm2);
      if (norm > grad_clip) scale = grad_clip / norm;
    }
    store.for_each([&](ad::Param& p) {
      auto& v = velocity_[p.name];
      if (v.empty()) v.assign(p.value.size(), 0.0);
      for (size_t i = 0; i < p.value.size(); ++i) {
        v[i] = momentum_ * v[i] - lr * scale * p.grad[i];
        p.value[i] += v[i];
      }
    });
  }

 private:
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

// Cosine annealing with linear warmup.
inline double lr_at(const TrainConfig& cfg, int step) {
  double warm = cfg.warmup_steps > 0 ? std::min(1.0, (step + 1.0) / cfg.warmup_steps) : 1.0;
  double progress = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 0.0;
  return cfg.lr * warm * 0.5 * (1.0 + std::cos(M_PI * progress));
}

inline std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// One training sample: a scene keyframe plus a sampled previous sweep.
struct TrainSample {
  int scene = 0, keyframe = 0, prev = 0;
  bool clamped = false;
};

inline TrainSample draw_sample(const std::vector<SceneSequence>& scenes, Rng& rng) {
  TrainSample s;
  s.scene = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(scenes.size()) - 1));
  const auto& seq = scenes[static_cast<size_t>(s.scene)];
  s.keyframe = seq.keyframes[static_cast<size_t>(
      rng.uniform_int(0, static_cast<int64_t>(seq.keyframes.size()) - 1))];
  auto prev = sample_prev_frame(seq, s.keyframe, SampleMode::train, rng);
  s.prev = prev.prev_idx;
  s.clamped = prev.clamped;
  return s;
}

struct TrainResult {
  std::vector<StepLosses> history;
  std::string log_csv;  // full text of the per-step log
};

// Trains in place. The scene config is needed to rasterize BEV ground truth.
inline TrainResult train_model(Model& model, const std::vector<SceneSequence>& scenes,
                               const SceneConfig& scene_cfg, const TrainConfig& cfg) {
  if (scenes.empty()) throw std::invalid_argument("train_model: empty dataset");
  cfg.weights.validate();
  Rng rng(mix_seed(cfg.seed, 0x7ea1a));
  SgdMomentum opt(cfg.momentum);
  auto& tape = ad::Tape::active();
  TrainResult result;
  result.log_csv = "step,lr,total,focal,l1,wce,matched\n";

  for (int step = 0; step < cfg.steps; ++step) {
    auto sample = draw_sample(scenes, rng);
    const auto& seq = scenes[static_cast<size_t>(sample.scene)];
    auto inputs = build_model_inputs(seq, sample.keyframe, sample.prev, model);
    auto gts = gt_boxes(seq, sample.keyframe, model.cfg.roi);
    auto gt_bev = bev_gt(seq, sample.keyframe, model.cfg.map_size, model.cfg.roi, scene_cfg);

    tape.reset();
    model.store.zero_grads();
    auto outputs = model.forward(tape, inputs);
    StepLosses losses;
    auto total = compute_losses(tape, model.cfg, outputs, gts, gt_bev, cfg.weights, &losses);
    if (!std::isfinite(losses.total))
      throw NumericFailure("train_model: non-finite loss at step " + std::to_string(step) +
                           " (focal=" + format_g17(losses.focal) + " l1=" + format_g17(losses.l1) +
                           " wce=" + format_g17(losses.wce) + ")");
    tape.backward(total);
    double lr = lr_at(cfg, step);
    opt.step(model.store, lr, cfg.grad_clip);

    result.history.push_back(losses);
    result.log_csv += std::to_string(step) + "," + format_g17(lr) + "," +
                      format_g17(losses.total) + "," + format_g17(losses.focal) + "," +
                      format_g17(losses.l1) + "," + format_g17(losses.wce) + "," +
                      std::to_string(losses.matched) + "\n";
  }
  tape.reset();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  double score_threshold = 0.05;  // detections below this are not reported
  int delay_sweeps = 0;
  int drop_camera = -1;
  bool zero_fill_drop = false;
  const CameraRig* coords_rig = nullptr;  // fixed noisy calibration
  // per-frame noisy calibration; overrides coords_rig when set
  std::function<CameraRig(const SceneSequence&, int keyframe)> rig_provider;
  bool eval_seg = true;
  int max_keyframes_per_scene = 0;  // 0 = all with full previous-frame history
};

struct FrameRecord {
  int scene = 0, keyframe = 0;
  DetFrame det;
  BEVMap pred_bev, gt_bev;
};

// Keyframes eligible for evaluation: enough history for the inference-mode
// previous frame (15 sweeps) without clamping.
inline std::vector<int> eval_keyframes(const SceneSequence& seq, int max_count) {
  std::vector<int> out;
  for (int k : seq.keyframes)
    if (k >= 15) out.push_back(k);
  if (max_count > 0 && static_cast<int>(out.size()) > max_count)
    out.resize(static_cast<size_t>(max_count));
  return out;
}

inline FrameRecord evaluate_frame(Model& model, const SceneSequence& seq, int keyframe,
                                  const SceneConfig& scene_cfg, const EvalOptions& opt) {
  Rng unused(0);
  auto prev = sample_prev_frame(seq, keyframe, SampleMode::infer, unused);
  InputOptions in_opt;
  in_opt.delay_sweeps = opt.delay_sweeps;
  in_opt.drop_camera = opt.drop_camera;
  in_opt.zero_fill_drop = opt.zero_fill_drop;
  in_opt.coords_rig = opt.coords_rig;
  CameraRig noisy;
  if (opt.rig_provider) {
    noisy = opt.rig_provider(seq, keyframe);
    in_opt.coords_rig = &noisy;
  }
  auto inputs = build_model_inputs(seq, keyframe, prev.prev_idx, model, in_opt);

  auto& tape = ad::Tape::active();
  tape.reset();
  auto outputs = model.forward(tape, inputs);

  FrameRecord rec;
  rec.scene = seq.scene_id;
  rec.keyframe = keyframe;
  rec.det.dets = decode_detections(outputs.det, opt.score_threshold);
  rec.det.gts = gt_boxes(seq, keyframe, model.cfg.roi);
  if (opt.eval_seg) {
    rec.pred_bev = outputs.bev;
    rec.gt_bev = bev_gt(seq, keyframe, model.cfg.map_size, model.cfg.roi, scene_cfg);
  }
  tape.reset();
  return rec;
}

struct EvalSummary {
  EvalResult det;
  std::vector<double> bev_iou;  // empty unless segmentation was evaluated
  int frames = 0;
};

inline EvalSummary evaluate_model(Model& model, const std::vector<SceneSequence>& scenes,
                                  const SceneConfig& scene_cfg, const EvalOptions& opt = {}) {
  std::vector<DetFrame> det_frames;
  BevIouAccumulator iou;
  int frames = 0;
  for (const auto& seq : scenes) {
    for (int k : eval_keyframes(seq, opt.max_keyframes_per_scene)) {
      auto rec = evaluate_frame(model, seq, k, scene_cfg, opt);
      det_frames.push_back(std::move(rec.det));
      if (opt.eval_seg) iou.add(rec.pred_bev, rec.gt_bev);
      ++frames;
    }
  }
  EvalSummary out;
  out.det = detection_metrics(det_frames, model.cfg.n_cls_det);
  if (opt.eval_seg) out.bev_iou = iou.result();
  out.frames = frames;
  return out;
}

}  // namespace mv3d
