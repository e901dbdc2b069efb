#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "mv3d/posembed.hpp"
#include "mv3d/rng.hpp"

using namespace mv3d;
using ad::Tape;
using ad::Tensor;

namespace {

std::vector<Coords3D> random_coords(int cams, int h, int w, int d, uint64_t seed) {
  Rng rng(seed);
  std::vector<Coords3D> out;
  for (int cam = 0; cam < cams; ++cam) {
    Coords3D c;
    c.feat_h = h;
    c.feat_w = w;
    c.depth_bins = d;
    c.normalized = true;
    c.frame = frame_lidar(0);
    for (int i = 0; i < h * w * d; ++i) {
      c.pts.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
      c.mask.push_back(1);
    }
    out.push_back(std::move(c));
  }
  return out;
}

FeatureMap random_features(int cams, int c_in, int h, int w, FrameTag tag, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(cams) * c_in * h * w);
  for (auto& x : v) x = rng.uniform(-1, 1);
  return {Tensor::constant({cams, c_in, h, w}, std::move(v)), tag};
}

void zero_params(nn::Mlp2& m) {
  std::fill(m.l1.w->value.begin(), m.l1.w->value.end(), 0.0);
  std::fill(m.l1.b->value.begin(), m.l1.b->value.end(), 0.0);
  std::fill(m.l2.w->value.begin(), m.l2.w->value.end(), 0.0);
  std::fill(m.l2.b->value.begin(), m.l2.b->value.end(), 0.0);
}

}  // namespace

TEST_CASE("zeroed coordinate MLP yields an all-zero embedding") {
  ad::ParamStore store;
  Rng rng(1);
  auto params = add_pos_encoder(store, "pe", 4, 8, 8, rng);
  zero_params(params.coord_mlp);
  auto coords = random_coords(2, 3, 3, 4, 42);
  Tape::active().reset();
  auto pe = pe_from_coords(Tape::active(), coords, params, FrameTag::current);
  REQUIRE(pe.t.shape == ad::Shape{2, 8, 3, 3});
  for (int64_t i = 0; i < pe.t.size(); ++i) REQUIRE(pe.t[i] == 0.0);
}

TEST_CASE("embedding shape contract for the full-size configuration") {
  ad::ParamStore store;
  Rng rng(2);
  auto params = add_pos_encoder(store, "pe", 64, 32, 32, rng);
  auto coords = random_coords(6, 16, 16, 64, 43);
  Tape::active().reset();
  auto pe = pe_from_coords(Tape::active(), coords, params, FrameTag::current);
  REQUIRE(pe.t.shape == ad::Shape{6, 32, 16, 16});
}

TEST_CASE("coords depth mismatch against the MLP input width is an error") {
  ad::ParamStore store;
  Rng rng(3);
  auto params = add_pos_encoder(store, "pe", 8, 8, 8, rng);
  auto coords = random_coords(1, 2, 2, 4, 44);  // depth 4, MLP expects 8
  Tape::active().reset();
  REQUIRE_THROWS_WITH(pe_from_coords(Tape::active(), coords, params, FrameTag::current),
                      Catch::Matchers::ContainsSubstring("does not match MLP input width"));
}

TEST_CASE("embedding gradients pass finite differences") {
  ad::ParamStore store;
  Rng rng(4);
  auto params = add_pos_encoder(store, "pe", 3, 4, 4, rng);
  auto coords = random_coords(1, 2, 2, 3, 45);
  double err = ad::grad_check_params(
      store,
      [&] {
        auto pe = pe_from_coords(Tape::active(), coords, params, FrameTag::current);
        return ad::reduce_sum(ad::mul(pe.t, pe.t));
      },
      1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("zeroed weight MLP halves the plain embedding") {
  ad::ParamStore store;
  Rng rng(5);
  auto params = add_pos_encoder(store, "pe", 3, 4, 6, rng);
  zero_params(params.weight_mlp);  // sigmoid(0) = 0.5 everywhere
  auto coords = random_coords(2, 2, 2, 3, 46);
  auto feats = random_features(2, 4, 2, 2, FrameTag::current, 47);
  Tape::active().reset();
  auto guided = feature_guided_pe(Tape::active(), feats, coords, params);
  auto plain = pe_from_coords(Tape::active(), coords, params, FrameTag::current);
  REQUIRE(guided.t.size() == plain.t.size());
  for (int64_t i = 0; i < guided.t.size(); ++i)
    REQUIRE(guided.t[i] == Catch::Approx(0.5 * plain.t[i]).margin(1e-15));
}

TEST_CASE("attention weights stay strictly inside (0,1)") {
  ad::ParamStore store;
  Rng rng(6);
  auto params = add_pos_encoder(store, "pe", 3, 4, 6, rng);
  // Make the plain embedding identically 1 so the output *is* the weights.
  zero_params(params.coord_mlp);
  std::fill(params.coord_mlp.l2.b->value.begin(), params.coord_mlp.l2.b->value.end(), 1.0);
  auto coords = random_coords(1, 3, 3, 3, 48);
  auto feats = random_features(1, 4, 3, 3, FrameTag::current, 49);
  Tape::active().reset();
  auto guided = feature_guided_pe(Tape::active(), feats, coords, params);
  for (int64_t i = 0; i < guided.t.size(); ++i) {
    REQUIRE(guided.t[i] > 0.0);
    REQUIRE(guided.t[i] < 1.0);
  }
}

TEST_CASE("feature-guided embedding gradients pass finite differences") {
  ad::ParamStore store;
  Rng rng(7);
  auto params = add_pos_encoder(store, "pe", 2, 3, 4, rng);
  auto coords = random_coords(1, 2, 2, 2, 50);
  auto feats = random_features(1, 3, 2, 2, FrameTag::current, 51);
  double err = ad::grad_check_params(
      store,
      [&] {
        auto pe = feature_guided_pe(Tape::active(), feats, coords, params);
        return ad::reduce_sum(ad::mul(pe.t, pe.t));
      },
      1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("identical coords give bit-identical embeddings") {
  ad::ParamStore store;
  Rng rng(8);
  auto params = add_pos_encoder(store, "pe", 3, 4, 6, rng);
  auto coords = random_coords(2, 3, 3, 3, 52);
  Tape::active().reset();
  auto a = pe_from_coords(Tape::active(), coords, params, FrameTag::current);
  Tape::active().reset();
  auto b = pe_from_coords(Tape::active(), coords, params, FrameTag::current);
  REQUIRE(std::memcmp(a.t.ptr(), b.t.ptr(), static_cast<size_t>(a.t.size()) * 8) == 0);
}

TEST_CASE("permuting the depth axis changes the embedding") {
  ad::ParamStore store;
  Rng rng(9);
  auto params = add_pos_encoder(store, "pe", 3, 4, 6, rng);
  auto coords = random_coords(1, 2, 2, 3, 53);
  auto permuted = coords;
  for (int64_t loc = 0; loc < 4; ++loc)
    std::swap(permuted[0].pts[static_cast<size_t>(loc * 3)], permuted[0].pts[static_cast<size_t>(loc * 3 + 2)]);
  Tape::active().reset();
  auto a = pe_from_coords(Tape::active(), coords, params, FrameTag::current);
  auto b = pe_from_coords(Tape::active(), permuted, params, FrameTag::current);
  bool any_diff = false;
  for (int64_t i = 0; i < a.t.size(); ++i)
    if (a.t[i] != b.t[i]) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("zero embedding makes keys equal values") {
  ad::ParamStore store;
  Rng rng(10);
  auto params = add_pos_encoder(store, "pe", 3, 4, 6, rng);
  auto feats_t = random_features(2, 4, 2, 2, FrameTag::current, 54);
  auto feats_p = random_features(2, 4, 2, 2, FrameTag::previous, 55);
  PosEmbed3D zero_t{Tensor::zeros({2, 6, 2, 2}), FrameTag::current};
  PosEmbed3D zero_p{Tensor::zeros({2, 6, 2, 2}), FrameTag::previous};
  Tape::active().reset();
  auto kv = build_key_value(Tape::active(), feats_t, feats_p, zero_t, zero_p, params);
  REQUIRE(kv.keys.shape == kv.values.shape);
  for (int64_t i = 0; i < kv.keys.size(); ++i) REQUIRE(kv.keys[i] == kv.values[i]);
}

TEST_CASE("key/value sequence length is 2 * cams * H * W") {
  ad::ParamStore store;
  Rng rng(11);
  auto params = add_pos_encoder(store, "pe", 4, 8, 32, rng);
  auto coords = random_coords(2, 8, 8, 4, 56);
  auto feats_t = random_features(2, 8, 8, 8, FrameTag::current, 57);
  auto feats_p = random_features(2, 8, 8, 8, FrameTag::previous, 58);
  Tape::active().reset();
  auto& tape = Tape::active();
  auto pe_t = pe_from_coords(tape, coords, params, FrameTag::current);
  auto pe_p = pe_from_coords(tape, coords, params, FrameTag::previous);
  auto kv = build_key_value(tape, feats_t, feats_p, pe_t, pe_p, params);
  REQUIRE(kv.keys.shape == ad::Shape{256, 32});
  REQUIRE(kv.values.shape == ad::Shape{256, 32});

  REQUIRE_THROWS_WITH(build_key_value(tape, feats_t, feats_p, pe_p, pe_t, params),
                      Catch::Matchers::ContainsSubstring("frame"));
}

TEST_CASE("swapping frames permutes tokens by the frame block and nothing else") {
  ad::ParamStore store;
  Rng rng(12);
  auto params = add_pos_encoder(store, "pe", 3, 4, 6, rng);
  auto coords = random_coords(2, 2, 2, 3, 59);
  auto fa = random_features(2, 4, 2, 2, FrameTag::current, 60);
  auto fb = random_features(2, 4, 2, 2, FrameTag::previous, 61);
  auto& tape = Tape::active();
  tape.reset();
  auto pa = pe_from_coords(tape, coords, params, FrameTag::current);
  auto pb = pe_from_coords(tape, coords, params, FrameTag::previous);
  auto kv1 = build_key_value(tape, fa, fb, pa, pb, params);
  // swap the roles of the two frames
  FeatureMap fa2{fb.t, FrameTag::current}, fb2{fa.t, FrameTag::previous};
  PosEmbed3D pa2{pb.t, FrameTag::current}, pb2{pa.t, FrameTag::previous};
  auto kv2 = build_key_value(tape, fa2, fb2, pa2, pb2, params);
  int64_t half = kv1.keys.size() / 2;
  for (int64_t i = 0; i < half; ++i) {
    REQUIRE(kv1.keys[i] == kv2.keys[half + i]);
    REQUIRE(kv1.keys[half + i] == kv2.keys[i]);
    REQUIRE(kv1.values[i] == kv2.values[half + i]);
  }
}
