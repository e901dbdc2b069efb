// 3D position embeddings for multi-view image features.
//
// Two variants: a plain embedding computed from frustum-point coordinates by
// an MLP, and a feature-guided one where per-pixel attention weights derived
// from the image features rescale the embedding elementwise. Keys for the
// decoder are projected features plus the embedding; values are the projected
// features alone. Two frames' tokens are concatenated current-frame first,
// camera-major, row-major.
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/geometry.hpp"
#include "mv3d/nn.hpp"
#include "mv3d/tensor.hpp"

namespace mv3d {

enum class FrameTag { current, previous };

// Image features for one frame: tensor [N_cams, C_in, H_f, W_f].
struct FeatureMap {
  ad::Tensor t;
  FrameTag tag = FrameTag::current;

  int cams() const { return t.shape[0]; }
  int channels() const { return t.shape[1]; }
  int feat_h() const { return t.shape[2]; }
  int feat_w() const { return t.shape[3]; }
};

// Position embedding for one frame: tensor [N_cams, C, H_f, W_f].
struct PosEmbed3D {
  ad::Tensor t;
  FrameTag tag = FrameTag::current;
};

// Parameters of the position encoder: the coordinate MLP (hidden 4*C), the
// attention-weight MLP (hidden C) and the shared 1x1 feature projection used
// by both the key and value paths.
struct PosEncoderParams {
  int depth_bins = 0, c_in = 0, c = 0;
  nn::Mlp2 coord_mlp;   // 3*D -> 4C -> C
  nn::Mlp2 weight_mlp;  // C -> C -> C
  nn::Linear proj;      // C_in -> C (1x1 conv as a matmul over flattened pixels)
};

inline PosEncoderParams add_pos_encoder(ad::ParamStore& store, const std::string& prefix,
                                        int depth_bins, int c_in, int c, Rng& rng) {
  PosEncoderParams p;
  p.depth_bins = depth_bins;
  p.c_in = c_in;
  p.c = c;
  p.coord_mlp = nn::add_mlp2(store, prefix + ".coord_mlp", 3 * depth_bins, 4 * c, c, rng);
  p.weight_mlp = nn::add_mlp2(store, prefix + ".weight_mlp", c, c, c, rng);
  p.proj = nn::add_linear(store, prefix + ".proj", c_in, c, rng);
  return p;
}

namespace detail {

// Flattens per-camera normalized coords into rows of 3*D values per spatial
// location, ordered depth-major (d0.xyz, d1.xyz, ...). Output [N*H*W, 3D].
inline ad::Tensor coords_input(const std::vector<Coords3D>& coords) {
  if (coords.empty()) throw std::invalid_argument("pos encoder: no cameras");
  int h = coords[0].feat_h, w = coords[0].feat_w, d = coords[0].depth_bins;
  int n = static_cast<int>(coords.size());
  std::vector<double> rows(static_cast<size_t>(n) * h * w * 3 * d);
  size_t at = 0;
  for (const auto& c : coords) {
    if (!c.normalized)
      throw std::invalid_argument("pos encoder: coords must be normalized to [0,1]^3");
    if (c.feat_h != h || c.feat_w != w || c.depth_bins != d)
      throw std::invalid_argument("pos encoder: camera coord shapes differ");
    for (int64_t loc = 0; loc < static_cast<int64_t>(h) * w; ++loc)
      for (int k = 0; k < d; ++k) {
        const Vec3& p = c.pts[static_cast<size_t>(loc * d + k)];
        rows[at++] = p.x;
        rows[at++] = p.y;
        rows[at++] = p.z;
      }
  }
  return ad::Tensor::constant({n * h * w, 3 * d}, std::move(rows));
}

// [N*H*W, C] -> [N, C, H, W]
inline ad::Tensor rows_to_nchw(const ad::Tensor& rows, int n, int h, int w, int c) {
  return ad::permute(ad::reshape(rows, {n, h, w, c}), {0, 3, 1, 2});
}

// [N, C, H, W] -> [N*H*W, C]
inline ad::Tensor nchw_to_rows(const ad::Tensor& x) {
  int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  return ad::reshape(ad::permute(x, {0, 2, 3, 1}), {n * h * w, c});
}

}  // namespace detail

// Plain 3D position embedding: coords -> MLP, per spatial location.
inline PosEmbed3D pe_from_coords(ad::Tape& tape, const std::vector<Coords3D>& coords,
                                 const PosEncoderParams& params, FrameTag tag) {
  int n = static_cast<int>(coords.size());
  int h = coords[0].feat_h, w = coords[0].feat_w, d = coords[0].depth_bins;
  if (3 * d != params.coord_mlp.l1.w->shape[0])
    throw std::invalid_argument("pe_from_coords: coords depth size 3*" + std::to_string(d) +
                                " does not match MLP input width " +
                                std::to_string(params.coord_mlp.l1.w->shape[0]));
  auto x = detail::coords_input(coords);
  auto pe = nn::apply_mlp2(tape, params.coord_mlp, x);
  return {detail::rows_to_nchw(pe, n, h, w, params.c), tag};
}

// Feature-guided embedding: sigmoid(weight_mlp(proj(F))) elementwise with the
// plain embedding.
inline PosEmbed3D feature_guided_pe(ad::Tape& tape, const FeatureMap& feats,
                                    const std::vector<Coords3D>& coords,
                                    const PosEncoderParams& params) {
  if (feats.feat_h() != coords[0].feat_h || feats.feat_w() != coords[0].feat_w ||
      feats.cams() != static_cast<int>(coords.size()))
    throw std::invalid_argument("feature_guided_pe: features and coords are not spatially aligned");
  auto rows = detail::nchw_to_rows(feats.t);
  auto projected = nn::apply_linear(tape, params.proj, rows);
  auto weights = ad::sigmoid(nn::apply_mlp2(tape, params.weight_mlp, projected));
  auto plain = nn::apply_mlp2(tape, params.coord_mlp, detail::coords_input(coords));
  auto pe = ad::mul(weights, plain);
  return {detail::rows_to_nchw(pe, feats.cams(), feats.feat_h(), feats.feat_w(), params.c),
          feats.tag};
}

// Key/value token sequences for the decoder. Token t is
//   key[t]   = proj(F)[t] + PE[t]
//   value[t] = proj(F)[t]
// with the current frame's tokens first.
struct KeyValue {
  ad::Tensor keys;    // [T, C]
  ad::Tensor values;  // [T, C]
};

namespace detail {

inline void check_kv_pair(const FeatureMap& f, const PosEmbed3D& pe) {
  if (f.tag != pe.tag)
    throw std::invalid_argument("build_key_value: feature/embedding frame tags differ");
  if (pe.t.shape[0] != f.cams() || pe.t.shape[2] != f.feat_h() || pe.t.shape[3] != f.feat_w())
    throw std::invalid_argument("build_key_value: feature/embedding shapes differ");
}

}  // namespace detail

inline KeyValue build_key_value(ad::Tape& tape, const FeatureMap& feats_t,
                                const FeatureMap& feats_prev, const PosEmbed3D& pe_t,
                                const PosEmbed3D& pe_prev, const PosEncoderParams& params) {
  if (feats_t.tag != FrameTag::current || feats_prev.tag != FrameTag::previous)
    throw std::invalid_argument("build_key_value: expected (current, previous) frame order");
  detail::check_kv_pair(feats_t, pe_t);
  detail::check_kv_pair(feats_prev, pe_prev);
  if (feats_t.t.shape != feats_prev.t.shape)
    throw std::invalid_argument("build_key_value: the two frames' features differ in shape");

  auto one = [&](const FeatureMap& f, const PosEmbed3D& pe) {
    auto projected = nn::apply_linear(tape, params.proj, detail::nchw_to_rows(f.t));
    auto keys = ad::add(projected, detail::nchw_to_rows(pe.t));
    return std::make_pair(keys, projected);
  };
  auto [k_cur, v_cur] = one(feats_t, pe_t);
  auto [k_prev, v_prev] = one(feats_prev, pe_prev);
  return {ad::concat({k_cur, k_prev}, 0), ad::concat({v_cur, v_prev}, 0)};
}

// Single-frame variant (temporal branch disabled): tokens from the current
// frame only.
inline KeyValue build_key_value_single(ad::Tape& tape, const FeatureMap& feats_t,
                                       const PosEmbed3D& pe_t, const PosEncoderParams& params) {
  detail::check_kv_pair(feats_t, pe_t);
  auto projected = nn::apply_linear(tape, params.proj, detail::nchw_to_rows(feats_t.t));
  return {ad::add(projected, detail::nchw_to_rows(pe_t.t)), projected};
}

}  // namespace mv3d
