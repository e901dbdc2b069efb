// Query sets and the transformer decoder.
//
// Detection queries come from learnable 3D anchor points, segmentation
// queries from fixed anchor points at BEV patch centers; both are embedded by
// a small MLP and processed jointly in one sequence. Each layer runs
// pre-norm self-attention over the query set, global cross-attention to the
// key/value tokens, and a feed-forward block. The anchor-derived embedding is
// added to the attention queries/keys at every layer.
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mv3d/nn.hpp"
#include "mv3d/rng.hpp"
#include "mv3d/tensor.hpp"

namespace mv3d {

struct DetQuerySet {
  int n = 0, c = 0;
  ad::Param* anchors = nullptr;  // [n, 3], learnable, normalized [0,1]^3
  nn::Mlp2 embed;                // 3 -> C -> C
};

struct SegQuerySet {
  int n = 0, c = 0;
  int grid_h = 0, grid_w = 0;  // patch grid (row-major anchor order)
  ad::Tensor anchors;          // [n, 2], fixed BEV patch centers, normalized
  nn::Mlp2 embed;              // 2 -> C -> C
};

inline DetQuerySet init_det_queries(ad::ParamStore& store, const std::string& prefix, int n, int c,
                                    uint64_t seed) {
  if (n < 1) throw std::invalid_argument("init_det_queries: n must be >= 1");
  Rng rng(mix_seed(seed, 0xde7));
  DetQuerySet q;
  q.n = n;
  q.c = c;
  q.anchors = &store.add(prefix + ".anchors", {n, 3});
  for (auto& v : q.anchors->value) v = rng.uniform();
  q.embed = nn::add_mlp2(store, prefix + ".embed", 3, c, c, rng);
  return q;
}

inline SegQuerySet init_seg_queries(ad::ParamStore& store, const std::string& prefix, int map_size,
                                    int patch_h, int patch_w, int c, uint64_t seed) {
  if (patch_h < 1 || patch_w < 1 || map_size % patch_h != 0 || map_size % patch_w != 0)
    throw std::invalid_argument("init_seg_queries: patch dims must divide map size " +
                                std::to_string(map_size));
  Rng rng(mix_seed(seed, 0x5e6));
  SegQuerySet q;
  q.c = c;
  q.grid_h = map_size / patch_h;
  q.grid_w = map_size / patch_w;
  q.n = q.grid_h * q.grid_w;
  std::vector<double> a(static_cast<size_t>(q.n) * 2);
  size_t at = 0;
  for (int gr = 0; gr < q.grid_h; ++gr)
    for (int gc = 0; gc < q.grid_w; ++gc) {
      a[at++] = (gr + 0.5) * patch_h / map_size;
      a[at++] = (gc + 0.5) * patch_w / map_size;
    }
  q.anchors = ad::Tensor::constant({q.n, 2}, std::move(a));
  q.embed = nn::add_mlp2(store, prefix + ".embed", 2, c, c, rng);
  return q;
}

struct AttentionParams {
  nn::Linear wq, wk, wv, wo;
};

struct DecoderLayerParams {
  AttentionParams self_attn, cross_attn;
  nn::LayerNormAffine ln1, ln2, ln3;
  nn::Linear ffn1, ffn2;
};

struct DecoderStack {
  int layers = 0, heads = 0, c = 0, ffn_hidden = 0;
  std::vector<DecoderLayerParams> layer;
};

inline AttentionParams add_attention(ad::ParamStore& store, const std::string& prefix, int c,
                                     Rng& rng) {
  // The key projection carries no bias: a shared key offset shifts each
  // score row uniformly, which softmax cancels, so its gradient is
  // identically zero.
  return {nn::add_linear(store, prefix + ".wq", c, c, rng),
          nn::add_linear_nobias(store, prefix + ".wk", c, c, rng),
          nn::add_linear(store, prefix + ".wv", c, c, rng),
          nn::add_linear(store, prefix + ".wo", c, c, rng)};
}

inline DecoderStack add_decoder_stack(ad::ParamStore& store, const std::string& prefix, int layers,
                                      int heads, int c, int ffn_hidden, Rng& rng) {
  if (c % heads != 0)
    throw std::invalid_argument("decoder: embedding dim " + std::to_string(c) +
                                " not divisible by " + std::to_string(heads) + " heads");
  DecoderStack s;
  s.layers = layers;
  s.heads = heads;
  s.c = c;
  s.ffn_hidden = ffn_hidden;
  for (int l = 0; l < layers; ++l) {
    std::string p = prefix + ".layer" + std::to_string(l);
    DecoderLayerParams lp;
    lp.self_attn = add_attention(store, p + ".self", c, rng);
    lp.cross_attn = add_attention(store, p + ".cross", c, rng);
    lp.ln1 = nn::add_layer_norm(store, p + ".ln1", c);
    lp.ln2 = nn::add_layer_norm(store, p + ".ln2", c);
    lp.ln3 = nn::add_layer_norm(store, p + ".ln3", c);
    lp.ffn1 = nn::add_linear(store, p + ".ffn1", c, ffn_hidden, rng);
    lp.ffn2 = nn::add_linear(store, p + ".ffn2", ffn_hidden, c, rng);
    s.layer.push_back(lp);
  }
  return s;
}

namespace detail {

inline ad::Tensor multi_head_attention(ad::Tape& tape, const AttentionParams& p, int heads,
                                       const ad::Tensor& q_in, const ad::Tensor& k_in,
                                       const ad::Tensor& v_in,
                                       std::vector<ad::Tensor>* attn_sink) {
  int c = q_in.shape[1];
  int nq = q_in.shape[0], nk = k_in.shape[0];
  int dh = c / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto q = nn::apply_linear(tape, p.wq, q_in);
  auto k = nn::apply_linear(tape, p.wk, k_in);
  auto v = nn::apply_linear(tape, p.wv, v_in);
  std::vector<ad::Tensor> ctx;
  ctx.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto qh = ad::slice(q, {0, h * dh}, {nq, (h + 1) * dh});
    auto kh = ad::slice(k, {0, h * dh}, {nk, (h + 1) * dh});
    auto vh = ad::slice(v, {0, h * dh}, {nk, (h + 1) * dh});
    auto scores = ad::affine(ad::matmul(qh, ad::transpose(kh)), scale, 0.0);
    auto attn = ad::softmax(scores, 1);
    if (attn_sink) attn_sink->push_back(attn);
    ctx.push_back(ad::matmul(attn, vh));
  }
  return nn::apply_linear(tape, p.wo, ad::concat(ctx, 1));
}

}  // namespace detail

struct DecodeResult {
  ad::Tensor det_embeds;  // [N_det, C]
  ad::Tensor seg_embeds;  // [N_seg, C]
};

// Runs the decoder over the joint det+seg query sequence. With layers == 0
// the initialized embeddings pass through unchanged. When attn_sink is given,
// every layer's per-head attention matrices are appended (self first, then
// cross).
inline DecodeResult decode(ad::Tape& tape, const DetQuerySet& det, const SegQuerySet& seg,
                           const ad::Tensor& keys, const ad::Tensor& values,
                           const DecoderStack& stack,
                           std::vector<ad::Tensor>* attn_sink = nullptr) {
  if (keys.rank() != 2 || values.rank() != 2 || keys.shape != values.shape)
    throw std::invalid_argument("decode: keys/values must be [T, C] of equal shape");
  if (keys.shape[1] != stack.c || det.c != stack.c || seg.c != stack.c)
    throw std::invalid_argument("decode: embedding width mismatch (keys " +
                                ad::shape_str(keys.shape) + ", stack C=" + std::to_string(stack.c) +
                                ")");

  auto det_anchor = tape.use(*det.anchors);
  auto det0 = nn::apply_mlp2(tape, det.embed, det_anchor);
  auto seg0 = nn::apply_mlp2(tape, seg.embed, seg.anchors);
  auto qpos = ad::concat({det0, seg0}, 0);  // anchor-derived positional term
  auto x = qpos;                            // initial content

  for (int l = 0; l < stack.layers; ++l) {
    const auto& lp = stack.layer[static_cast<size_t>(l)];
    auto h1 = nn::apply_layer_norm(tape, lp.ln1, x);
    auto qk = ad::add(h1, qpos);
    x = ad::add(x, detail::multi_head_attention(tape, lp.self_attn, stack.heads, qk, qk, h1, attn_sink));
    auto h2 = nn::apply_layer_norm(tape, lp.ln2, x);
    auto q2 = ad::add(h2, qpos);
    x = ad::add(x, detail::multi_head_attention(tape, lp.cross_attn, stack.heads, q2, keys, values,
                                                attn_sink));
    auto h3 = nn::apply_layer_norm(tape, lp.ln3, x);
    auto ff = nn::apply_linear(tape, lp.ffn2, ad::relu(nn::apply_linear(tape, lp.ffn1, h3)));
    x = ad::add(x, ff);
  }

  DecodeResult out;
  out.det_embeds = ad::slice(x, {0, 0}, {det.n, stack.c});
  out.seg_embeds = ad::slice(x, {det.n, 0}, {det.n + seg.n, stack.c});
  return out;
}

}  // namespace mv3d
