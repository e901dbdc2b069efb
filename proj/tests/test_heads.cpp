#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mv3d/heads.hpp"

using namespace mv3d;
using ad::Tape;
using ad::Tensor;

namespace {

Tensor random_mat(int r, int c, uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(r) * c);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::constant({r, c}, std::move(v));
}

Tensor random_anchors(int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(n) * 3);
  for (auto& x : v) x = rng.uniform(0.1, 0.9);
  return Tensor::constant({n, 3}, std::move(v));
}

// independent scalar focal-loss oracle
double focal_oracle(const std::vector<double>& logits, const std::vector<int>& targets, int n_cls,
                    double gamma, double alpha) {
  int n = static_cast<int>(targets.size());
  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < n_cls; ++c) {
      double p = 1.0 / (1.0 + std::exp(-logits[static_cast<size_t>(i) * n_cls + c]));
      p = std::min(std::max(p, 1e-7), 1.0 - 1e-7);
      bool is_t = targets[static_cast<size_t>(i)] == c;
      if (is_t)
        total += -alpha * std::pow(1 - p, gamma) * std::log(p);
      else
        total += -(1 - alpha) * std::pow(p, gamma) * std::log(1 - p);
    }
  return total / n;
}

BEVMap map_from(std::vector<double> v, int n_cls, int h, int w) {
  BEVMap m;
  m.values = Tensor::constant({n_cls, h, w}, std::move(v));
  return m;
}

}  // namespace

TEST_CASE("detection head output shapes and positive sizes") {
  ad::ParamStore store;
  Rng rng(21);
  auto head = add_detection_head(store, "det_head", 16, 3, rng);
  auto embeds = random_mat(12, 16, 80);
  auto anchors = random_anchors(12, 81);
  Tape::active().reset();
  auto det = detection_head(Tape::active(), embeds, anchors, head, Roi{}, 12.0);
  REQUIRE(det.class_logits.shape == ad::Shape{12, 3});
  REQUIRE(det.box.shape == ad::Shape{12, 10});
  REQUIRE(det.box_norm.shape == ad::Shape{12, 10});
  for (int i = 0; i < 12; ++i)
    for (int d = 3; d < 6; ++d) REQUIRE(det.box[static_cast<int64_t>(i) * 10 + d] > 0.0);
  // centers inside the ROI
  Roi roi;
  for (int i = 0; i < 12; ++i) {
    const double* b = det.box.ptr() + static_cast<int64_t>(i) * 10;
    REQUIRE(roi.contains({b[0], b[1], b[2]}));
  }
}

TEST_CASE("detection head gradients pass finite differences") {
  ad::ParamStore store;
  Rng rng(22);
  auto head = add_detection_head(store, "det_head", 6, 2, rng);
  auto embeds = random_mat(3, 6, 82);
  auto anchors = random_anchors(3, 83);
  double err = ad::grad_check_params(
      store,
      [&] {
        auto det = detection_head(Tape::active(), embeds, anchors, head, Roi{}, 12.0);
        auto a = ad::reduce_sum(ad::mul(det.box_norm, det.box_norm));
        auto b = ad::reduce_sum(ad::mul(det.class_logits, det.class_logits));
        // include the decoded box so exp/sigmoid decode paths are covered
        auto c = ad::reduce_mean(ad::mul(det.box, det.box));
        return ad::add(ad::add(a, b), ad::affine(c, 1e-3, 0.0));
      },
      1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("segmentation head assembles full maps for both patch configs") {
  for (auto [patch, queries] : std::vector<std::pair<int, int>>{{16, 256}, {32, 64}}) {
    ad::ParamStore store;
    Rng rng(23);
    auto head = add_segmentation_head(store, "seg_head", 8, 3, patch, patch, 256, rng);
    auto embeds = random_mat(queries, 8, 84);
    Tape::active().reset();
    auto bev = segmentation_head(Tape::active(), embeds, head);
    REQUIRE(bev.values.shape == ad::Shape{3, 256, 256});
    for (int64_t i = 0; i < bev.values.size(); ++i) {
      REQUIRE(bev.values[i] > 0.0);
      REQUIRE(bev.values[i] < 1.0);
    }
  }
}

TEST_CASE("patch assembly and partition are exact inverses") {
  for (auto [ph, pw] : std::vector<std::pair<int, int>>{{16, 16}, {32, 32}, {32, 16}}) {
    int gh = 256 / ph, gw = 256 / pw;
    auto rows = random_mat(gh * gw, 3 * ph * pw, 85 + ph + pw);
    Tape::active().reset();
    auto map = assemble_patches(rows, 3, ph, pw, 256);
    REQUIRE(map.shape == ad::Shape{3, 256, 256});
    auto back = partition_patches(map, ph, pw);
    REQUIRE(back.shape == rows.shape);
    for (int64_t i = 0; i < rows.size(); ++i) REQUIRE(back[i] == rows[i]);
    // and the other direction
    auto map2 = assemble_patches(back, 3, ph, pw, 256);
    for (int64_t i = 0; i < map.size(); ++i) REQUIRE(map2[i] == map[i]);
  }
}

TEST_CASE("patch placement puts query 0 at the top-left block") {
  // 1 class, 4x4 map, 2x2 patches: query rows hold distinct constants.
  std::vector<double> rows(4 * 4, 0.0);
  for (int q = 0; q < 4; ++q)
    for (int i = 0; i < 4; ++i) rows[static_cast<size_t>(q) * 4 + i] = q + 1;
  auto t = Tensor::constant({4, 4}, rows);
  auto map = assemble_patches(t, 1, 2, 2, 4);
  // row-major patch order: q0 top-left, q1 top-right, q2 bottom-left, q3 bottom-right
  REQUIRE(map[0 * 4 + 0] == 1);
  REQUIRE(map[0 * 4 + 2] == 2);
  REQUIRE(map[2 * 4 + 0] == 3);
  REQUIRE(map[2 * 4 + 2] == 4);
}

TEST_CASE("weighted cross entropy matches the hand-computed case") {
  auto gt = map_from({1, 0, 0, 0}, 1, 2, 2);
  auto pred = map_from({0.5, 0.5, 0.5, 0.5}, 1, 2, 2);
  Tape::active().reset();
  auto loss = weighted_ce_loss(Tape::active(), pred, gt);
  // omega = 3, loss = (1/4) * (3 log2 + 3 log2) = 1.5 log 2
  REQUIRE(std::fabs(loss.item() - 1.5 * std::log(2.0)) < 1e-12);
}

TEST_CASE("weighted cross entropy near zero for perfect predictions") {
  auto gt = map_from({1, 0, 0, 1, 0, 0, 0, 0}, 2, 2, 2);
  std::vector<double> perfect(8);
  for (int i = 0; i < 8; ++i) perfect[static_cast<size_t>(i)] = gt.values[i];
  auto pred = map_from(perfect, 2, 2, 2);
  Tape::active().reset();
  auto loss = weighted_ce_loss(Tape::active(), pred, gt);
  REQUIRE(loss.item() >= 0.0);
  REQUIRE(loss.item() < 1e-4);
}

TEST_CASE("weighted cross entropy rejects non-binary ground truth") {
  auto gt = map_from({0.5, 0, 0, 0}, 1, 2, 2);
  auto pred = map_from({0.5, 0.5, 0.5, 0.5}, 1, 2, 2);
  Tape::active().reset();
  REQUIRE_THROWS_WITH(weighted_ce_loss(Tape::active(), pred, gt),
                      Catch::Matchers::ContainsSubstring("binary"));
}

TEST_CASE("omega is invariant to tiling the ground truth") {
  // loss(y=const) depends on gt only through omega; tiling preserves it
  auto gt1 = map_from({1, 0, 0, 0}, 1, 2, 2);
  std::vector<double> tiled(16, 0.0);
  tiled[0] = tiled[2] = tiled[8] = tiled[10] = 1.0;  // 2x2 tiling of the same pattern
  auto gt2 = map_from(tiled, 1, 4, 4);
  auto pred1 = map_from(std::vector<double>(4, 0.3), 1, 2, 2);
  auto pred2 = map_from(std::vector<double>(16, 0.3), 1, 4, 4);
  Tape::active().reset();
  auto l1 = weighted_ce_loss(Tape::active(), pred1, gt1);
  auto l2 = weighted_ce_loss(Tape::active(), pred2, gt2);
  REQUIRE(l1.item() == Catch::Approx(l2.item()).margin(1e-14));
}

TEST_CASE("zero-positive class uses the omega cap and stays finite") {
  auto gt = map_from({0, 0, 0, 0}, 1, 2, 2);
  auto pred = map_from({0.1, 0.2, 0.3, 0.4}, 1, 2, 2);
  Tape::active().reset();
  auto loss = weighted_ce_loss(Tape::active(), pred, gt, 50.0);
  REQUIRE(std::isfinite(loss.item()));
  REQUIRE(loss.item() > 0.0);
}

TEST_CASE("one gradient step decreases the weighted cross entropy") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    ad::ParamStore store;
    auto& logits = store.add("logits", {1, 4, 4});
    for (auto& v : logits.value) v = rng.uniform(-2, 2);
    std::vector<double> gtv(16, 0.0);
    for (auto& v : gtv) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    auto gt = map_from(gtv, 1, 4, 4);
    auto forward = [&] {
      BEVMap pred;
      pred.values = ad::sigmoid(Tape::active().use(logits));
      return weighted_ce_loss(Tape::active(), pred, gt);
    };
    Tape::active().reset();
    store.zero_grads();
    auto l0 = forward();
    Tape::active().backward(l0);
    for (size_t i = 0; i < logits.value.size(); ++i) logits.value[i] -= 0.05 * logits.grad[i];
    Tape::active().reset();
    REQUIRE(forward().item() < l0.item());
  }
}

TEST_CASE("focal loss degenerates to half binary CE at gamma 0, alpha one half") {
  auto logits = random_mat(5, 3, 86, -2, 2);
  std::vector<int> targets = {0, 2, -1, 1, 2};
  Tape::active().reset();
  auto fl = focal_loss(Tape::active(), logits, targets, 0.0, 0.5);
  double bce = 0;
  for (int i = 0; i < 5; ++i)
    for (int c = 0; c < 3; ++c) {
      double p = 1.0 / (1.0 + std::exp(-logits[static_cast<int64_t>(i) * 3 + c]));
      bool is_t = targets[static_cast<size_t>(i)] == c;
      bce += is_t ? -std::log(p) : -std::log(1 - p);
    }
  bce /= 5;
  REQUIRE(fl.item() == Catch::Approx(0.5 * bce).margin(1e-10));
}

TEST_CASE("focal loss is near zero for confident correct logits") {
  std::vector<double> v = {9, -9, -9, -9, 9, -9};
  auto logits = Tensor::constant({2, 3}, v);
  Tape::active().reset();
  auto fl = focal_loss(Tape::active(), logits, {0, 1}, 2.0, 0.25);
  REQUIRE(fl.item() < 1e-4);
}

TEST_CASE("focal loss matches the scalar oracle on random cases") {
  Rng rng(87);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 1 + static_cast<int>(rng.uniform_int(1, 6));
    int n_cls = 2 + static_cast<int>(rng.uniform_int(0, 2));
    std::vector<double> lv(static_cast<size_t>(n) * n_cls);
    for (auto& x : lv) x = rng.uniform(-3, 3);
    std::vector<int> targets(static_cast<size_t>(n));
    for (auto& t : targets) t = static_cast<int>(rng.uniform_int(-1, n_cls - 1));
    auto logits = Tensor::constant({n, n_cls}, lv);
    Tape::active().reset();
    auto fl = focal_loss(Tape::active(), logits, targets, 2.0, 0.25);
    REQUIRE(fl.item() == Catch::Approx(focal_oracle(lv, targets, n_cls, 2.0, 0.25)).margin(1e-10));
  }
  Tape::active().reset();
  REQUIRE_THROWS_WITH(focal_loss(Tape::active(), random_mat(2, 3, 88), {0, 7}, 2.0, 0.25),
                      Catch::Matchers::ContainsSubstring("invalid class index"));
}

TEST_CASE("focal loss gradients pass finite differences") {
  ad::ParamStore store;
  Rng rng(33);
  auto& logits = store.add("logits", {4, 3});
  for (auto& v : logits.value) v = rng.uniform(-2, 2);
  std::vector<int> targets = {0, -1, 2, 1};
  double err = ad::grad_check_params(
      store,
      [&] {
        return focal_loss(Tape::active(), Tape::active().use(logits), targets, 2.0, 0.25);
      },
      1e-5);
  REQUIRE(err < 1e-4);
}

TEST_CASE("l1 box loss basics") {
  Roi roi;
  double v_max = 12.0;
  std::vector<GtBox> gts(2);
  gts[0] = {0, {5, 2, 0}, {4, 2, 1.6}, 0.3, 2, 1};
  gts[1] = {1, {-8, 4, 0.5}, {8, 2.5, 3}, -1.0, 0, 0};
  // predictions exactly equal to normalized gts
  std::vector<double> rows;
  for (const auto& g : gts) {
    auto nb = normalize_gt_box(g, roi, v_max);
    rows.insert(rows.end(), nb.begin(), nb.end());
  }
  auto pred = Tensor::constant({2, 10}, rows);
  Assignment a;
  a.pairs = {{0, 0}, {1, 1}};
  Tape::active().reset();
  REQUIRE(l1_box_loss(Tape::active(), pred, gts, a, roi, v_max).item() == 0.0);

  // one pair, one dim differs by 1.0 -> mean over 10 dims = 0.1
  auto nb = normalize_gt_box(gts[0], roi, v_max);
  nb[6] += 1.0;
  auto pred2 = Tensor::constant({1, 10}, std::vector<double>(nb.begin(), nb.end()));
  Assignment a2;
  a2.pairs = {{0, 0}};
  REQUIRE(l1_box_loss(Tape::active(), pred2, gts, a2, roi, v_max).item() ==
          Catch::Approx(0.1).margin(1e-12));

  // empty assignment -> 0
  Assignment empty;
  REQUIRE(l1_box_loss(Tape::active(), pred, gts, empty, roi, v_max).item() == 0.0);
}

TEST_CASE("l1 box loss equals a scalar oracle on random cases") {
  Rng rng(89);
  Roi roi;
  double v_max = 12.0;
  std::vector<GtBox> gts(3);
  for (auto& g : gts) {
    g.cls = 0;
    g.center = {rng.uniform(-30, 30), rng.uniform(-30, 30), rng.uniform(-2, 2)};
    g.size = {rng.uniform(2, 6), rng.uniform(2, 6), rng.uniform(1, 3)};
    g.yaw = rng.uniform(-3, 3);
    g.vx = rng.uniform(-5, 5);
    g.vy = rng.uniform(-5, 5);
  }
  auto pred = random_mat(4, 10, 90, -0.5, 1.5);
  Assignment a;
  a.pairs = {{2, 0}, {0, 1}, {3, 2}};
  Tape::active().reset();
  auto loss = l1_box_loss(Tape::active(), pred, gts, a, roi, v_max);
  double want = 0;
  for (auto [pi, gi] : a.pairs) {
    auto nb = normalize_gt_box(gts[static_cast<size_t>(gi)], roi, v_max);
    for (int d = 0; d < 10; ++d) want += std::fabs(pred[static_cast<int64_t>(pi) * 10 + d] - nb[d]);
  }
  want /= 30.0;
  REQUIRE(loss.item() == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("match cost favors the exactly matching ground truth") {
  Roi roi;
  std::vector<GtBox> gts(3);
  gts[0] = {0, {10, 5, 0}, {4, 2, 1.5}, 0.4, 3, 0};
  gts[1] = {1, {-20, 8, 0.2}, {8, 2.5, 3}, 1.2, 0, 0};
  gts[2] = {0, {25, -12, -0.5}, {4.5, 2, 1.4}, -0.8, -2, 1};

  // craft a Detection3D whose query 1 equals gt 1 with confident class
  int n = 3, n_cls = 2;
  std::vector<double> logits(static_cast<size_t>(n) * n_cls, -4.0);
  logits[1 * n_cls + 1] = 6.0;
  std::vector<double> boxes;
  std::vector<GtBox> fake = {{0, {0, 0, 0}, {3, 2, 1}, 0, 0, 0}, gts[1], {0, {5, 5, 0}, {3, 2, 1}, 0, 0, 0}};
  for (const auto& g : fake) {
    auto nb = normalize_gt_box(g, roi, 12.0);
    boxes.insert(boxes.end(), nb.begin(), nb.end());
  }
  Detection3D det;
  det.class_logits = Tensor::constant({n, n_cls}, logits);
  det.box_norm = Tensor::constant({n, 10}, boxes);
  auto cost = match_cost(det, gts, roi, 12.0);
  REQUIRE(cost.rows == 3);
  REQUIRE(cost.cols == 3);
  REQUIRE(cost.at(1, 1) < cost.at(1, 0));
  REQUIRE(cost.at(1, 1) < cost.at(1, 2));
  // the optimal assignment includes (1, 1) and beats swapping it
  auto assign = hungarian_match(cost);
  bool has11 = false;
  for (auto [p, g] : assign.pairs) has11 |= (p == 1 && g == 1);
  REQUIRE(has11);
  double alt = cost.at(0, 0) + cost.at(1, 2) + cost.at(2, 1);
  REQUIRE(assign.total_cost <= alt);
}
