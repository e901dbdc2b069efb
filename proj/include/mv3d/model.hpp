// Full network: convolutional image encoder, position embeddings, joint
// det+seg query decoder, and the two heads, wired per frame pair.
//
// The encoder downsamples 16x in three strided convolutions, so feature maps
// live at 1/16 input resolution. The geometry path (frustum unprojection,
// temporal alignment, normalization) happens in build_model_inputs, outside
// the network, and never carries gradients.
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/decoder.hpp"
#include "mv3d/geometry.hpp"
#include "mv3d/heads.hpp"
#include "mv3d/posembed.hpp"
#include "mv3d/scene.hpp"

namespace mv3d {

struct ModelConfig {
  int cameras = 2;
  int img_w = 128, img_h = 128;
  int c = 64;  // embedding width
  int layers = 3, heads = 4;
  int ffn_hidden = 128;
  int n_det = 64;
  int n_cls_det = 3;
  int n_cls_seg = 3;
  int map_size = 256;
  int patch_h = 32, patch_w = 32;
  int depth_bins = 16;
  double depth_min = 1.0, depth_max = 45.0;
  int enc_c1 = 16, enc_c2 = 32;
  Roi roi;
  double v_max = 12.0;
  double focal_gamma = 2.0, focal_alpha = 0.25;
  double lambda_cls = 1.0, lambda_box = 5.0;
  double omega_max = 100.0;
  bool use_fpe = true;
  bool use_ca = true;
  bool single_frame = false;

  static constexpr int kStride = 16;  // fixed by the 3-conv encoder (4*2*2)

  int feat_w() const { return img_w / kStride; }
  int feat_h() const { return img_h / kStride; }

  void validate() const {
    if (img_w % kStride != 0 || img_h % kStride != 0)
      throw std::invalid_argument("ModelConfig: image size must be divisible by 16");
    if (c % heads != 0) throw std::invalid_argument("ModelConfig: C must be divisible by heads");
    if (map_size % patch_h != 0 || map_size % patch_w != 0)
      throw std::invalid_argument("ModelConfig: patch size must divide the map size");
    if (cameras < 1 || n_det < 1 || depth_bins < 1 || layers < 0)
      throw std::invalid_argument("ModelConfig: bad counts");
    if (!(depth_max > depth_min) || depth_min <= 0)
      throw std::invalid_argument("ModelConfig: bad depth range");
    roi.validate();
  }
};

struct ConvEncoderParams {
  nn::Linear conv1, conv2, conv3;  // weights [kh*kw*cin, cout]
};

inline ConvEncoderParams add_conv_encoder(ad::ParamStore& store, const std::string& prefix,
                                          int c1, int c2, int c_out, Rng& rng) {
  ConvEncoderParams p;
  p.conv1 = nn::add_linear(store, prefix + ".conv1", 5 * 5 * 1, c1, rng);
  p.conv2 = nn::add_linear(store, prefix + ".conv2", 3 * 3 * c1, c2, rng);
  p.conv3 = nn::add_linear(store, prefix + ".conv3", 3 * 3 * c2, c_out, rng);
  return p;
}

// [H, W, 1] image -> [H/16 * W/16, C] rows (channels-last).
inline ad::Tensor encode_image(ad::Tape& tape, const ad::Tensor& img,
                               const ConvEncoderParams& p, int c1, int c2) {
  int h = img.shape[0], w = img.shape[1];
  auto x = ad::relu(nn::apply_linear(tape, p.conv1, ad::im2col(img, 5, 5, 4, 2)));
  x = ad::reshape(x, {h / 4, w / 4, c1});
  x = ad::relu(nn::apply_linear(tape, p.conv2, ad::im2col(x, 3, 3, 2, 1)));
  x = ad::reshape(x, {h / 8, w / 8, c2});
  return nn::apply_linear(tape, p.conv3, ad::im2col(x, 3, 3, 2, 1));
}

// Network inputs for one sample: per-camera grayscale images in [0,1] and
// normalized frustum coordinates, for the current and (optionally) previous
// frame. Dropped cameras are simply absent from these vectors.
struct ModelInputs {
  std::vector<std::vector<double>> cur_images, prev_images;
  std::vector<Coords3D> cur_coords, prev_coords;
  bool has_prev = false;
};

struct ModelOutputs {
  Detection3D det;
  BEVMap bev;
  ad::Tensor det_embeds, seg_embeds;
};

class Model {
 public:
  ModelConfig cfg;
  ad::ParamStore store;
  ConvEncoderParams encoder;
  PosEncoderParams pos_enc;
  DetQuerySet det_q;
  SegQuerySet seg_q;
  DecoderStack decoder;
  DetectionHeadParams det_head;
  SegmentationHeadParams seg_head;
  FrustumGrid grid;

  Model(const ModelConfig& config, uint64_t seed) : cfg(config) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0x30de1));
    encoder = add_conv_encoder(store, "encoder", cfg.enc_c1, cfg.enc_c2, cfg.c, rng);
    pos_enc = add_pos_encoder(store, "pos_enc", cfg.depth_bins, cfg.c, cfg.c, rng);
    det_q = init_det_queries(store, "det_q", cfg.n_det, cfg.c, mix_seed(seed, 0xde70));
    seg_q = init_seg_queries(store, "seg_q", cfg.map_size, cfg.patch_h, cfg.patch_w, cfg.c,
                             mix_seed(seed, 0x5e60));
    decoder = add_decoder_stack(store, "decoder", cfg.layers, cfg.heads, cfg.c, cfg.ffn_hidden, rng);
    det_head = add_detection_head(store, "det_head", cfg.c, cfg.n_cls_det, rng);
    seg_head = add_segmentation_head(store, "seg_head", cfg.c, cfg.n_cls_seg, cfg.patch_h,
                                     cfg.patch_w, cfg.map_size, rng);
    grid = make_frustum_grid(cfg.feat_w(), cfg.feat_h(), ModelConfig::kStride,
                             DepthSpec{cfg.depth_bins, cfg.depth_min, cfg.depth_max});
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ModelOutputs forward(ad::Tape& tape, const ModelInputs& in) {
    if (in.cur_images.empty() || in.cur_images.size() != in.cur_coords.size())
      throw std::invalid_argument("Model::forward: camera images/coords mismatch");
    bool two_frame = !cfg.single_frame && in.has_prev;

    auto feats_cur = encode_frame(tape, in.cur_images, FrameTag::current);
    auto pe_cur = make_pe(tape, feats_cur, in.cur_coords);
    KeyValue kv;
    if (two_frame) {
      auto feats_prev = encode_frame(tape, in.prev_images, FrameTag::previous);
      auto pe_prev = make_pe(tape, feats_prev, in.prev_coords);
      kv = build_key_value(tape, feats_cur, feats_prev, pe_cur, pe_prev, pos_enc);
    } else {
      kv = build_key_value_single(tape, feats_cur, pe_cur, pos_enc);
    }

    auto decoded = decode(tape, det_q, seg_q, kv.keys, kv.values, decoder);
    ModelOutputs out;
    out.det_embeds = decoded.det_embeds;
    out.seg_embeds = decoded.seg_embeds;
    out.det = detection_head(tape, decoded.det_embeds, tape.use(*det_q.anchors), det_head, cfg.roi,
                             cfg.v_max);
    out.bev = segmentation_head(tape, decoded.seg_embeds, seg_head);
    return out;
  }

 private:
  FeatureMap encode_frame(ad::Tape& tape, const std::vector<std::vector<double>>& images,
                          FrameTag tag) {
    int hf = cfg.feat_h(), wf = cfg.feat_w();
    std::vector<ad::Tensor> per_cam;
    for (const auto& img : images) {
      if (static_cast<int>(img.size()) != cfg.img_w * cfg.img_h)
        throw std::invalid_argument("Model::forward: image size mismatch");
      auto t = ad::Tensor::constant({cfg.img_h, cfg.img_w, 1}, img);
      auto rows = encode_image(tape, t, encoder, cfg.enc_c1, cfg.enc_c2);
      per_cam.push_back(ad::reshape(rows, {1, hf, wf, cfg.c}));
    }
    auto stacked = per_cam.size() == 1 ? per_cam[0] : ad::concat(per_cam, 0);
    return {ad::permute(stacked, {0, 3, 1, 2}), tag};  // [N, C, H, W]
  }

  PosEmbed3D make_pe(ad::Tape& tape, const FeatureMap& feats, const std::vector<Coords3D>& coords) {
    return cfg.use_fpe ? feature_guided_pe(tape, feats, coords, pos_enc)
                       : pe_from_coords(tape, coords, pos_enc, feats.tag);
  }
};

// ---------------------------------------------------------------------------
// Input construction (geometry path, no gradients)

struct InputOptions {
  int drop_camera = -1;        // remove this camera's tokens entirely
  bool zero_fill_drop = false; // blank its pixels instead of removing tokens
  int delay_sweeps = 0;        // images taken this many sweeps in the past
  const CameraRig* coords_rig = nullptr;  // rig used for unprojection (noisy
                                          // calibration); images always render
                                          // from the scene's true rig
};

inline std::vector<double> image_to_unit(const PgmImage& img) {
  std::vector<double> out(img.pixels.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] / 255.0;
  return out;
}

// Assembles network inputs for (current sweep, previous sweep). Coordinates
// use the believed poses at the requested sweeps; delayed images come from
// earlier sweeps while poses and annotations stay current.
inline ModelInputs build_model_inputs(const SceneSequence& seq, int cur_sweep, int prev_sweep,
                                      const Model& model, const InputOptions& opt = {}) {
  const ModelConfig& cfg = model.cfg;
  const CameraRig& true_rig = seq.rig;
  const CameraRig& coords_rig = opt.coords_rig ? *opt.coords_rig : seq.rig;
  if (coords_rig.cameras() != true_rig.cameras())
    throw std::invalid_argument("build_model_inputs: rig camera counts differ");
  if (opt.drop_camera >= true_rig.cameras())
    throw std::invalid_argument("build_model_inputs: invalid camera id " +
                                std::to_string(opt.drop_camera));

  ModelInputs in;
  in.has_prev = !cfg.single_frame;

  auto render_at = [&](int sweep) {
    int delayed = std::max(0, sweep - opt.delay_sweeps);
    return render_views(seq, delayed, true_rig);
  };
  auto views_cur = render_at(cur_sweep);
  std::vector<PgmImage> views_prev;
  if (in.has_prev) views_prev = render_at(prev_sweep);

  RigidTransform rel;
  if (in.has_prev && cfg.use_ca)
    rel = relative_lidar_transform(seq.lidar_to_ego_t(cur_sweep), seq.ego_to_global_t(cur_sweep),
                                   seq.lidar_to_ego_t(prev_sweep), seq.ego_to_global_t(prev_sweep));

  for (int cam = 0; cam < true_rig.cameras(); ++cam) {
    bool dropped = cam == opt.drop_camera;
    if (dropped && !opt.zero_fill_drop) continue;

    auto img_cur = image_to_unit(views_cur[static_cast<size_t>(cam)]);
    if (dropped) std::fill(img_cur.begin(), img_cur.end(), 0.0);
    in.cur_images.push_back(std::move(img_cur));
    auto coords_cur =
        unproject_to_lidar(model.grid, coords_rig.intrinsics[static_cast<size_t>(cam)],
                           coords_rig.cam_to_lidar_t(cam, cur_sweep));
    in.cur_coords.push_back(normalize_coords(coords_cur, cfg.roi));

    if (in.has_prev) {
      auto img_prev = image_to_unit(views_prev[static_cast<size_t>(cam)]);
      if (dropped) std::fill(img_prev.begin(), img_prev.end(), 0.0);
      in.prev_images.push_back(std::move(img_prev));
      auto coords_prev =
          unproject_to_lidar(model.grid, coords_rig.intrinsics[static_cast<size_t>(cam)],
                             coords_rig.cam_to_lidar_t(cam, prev_sweep));
      if (cfg.use_ca) {
        in.prev_coords.push_back(normalize_coords(align_coords(coords_prev, rel), cfg.roi));
      } else {
        // alignment disabled: previous-frame coords stay in their own lidar
        // frame (numerically reinterpreted as current-frame coordinates)
        in.prev_coords.push_back(normalize_coords(coords_prev, cfg.roi));
      }
    }
  }
  if (in.cur_images.empty())
    throw std::invalid_argument("build_model_inputs: all cameras were dropped");
  return in;
}

}  // namespace mv3d
