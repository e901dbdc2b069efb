#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mv3d/geometry.hpp"
#include "mv3d/rng.hpp"

using namespace mv3d;

namespace {

std::array<double, 9> random_rotation(Rng& rng) {
  // Uniform rotation from a normalized quaternion.
  double w = rng.normal(), x = rng.normal(), y = rng.normal(), z = rng.normal();
  double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
          2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

RigidTransform random_se3(Rng& rng, std::string src, std::string dst, double t_range = 10.0) {
  Vec3 t{rng.uniform(-t_range, t_range), rng.uniform(-t_range, t_range), rng.uniform(-t_range, t_range)};
  return RigidTransform::make(mat4_from_rt(random_rotation(rng), t), std::move(src), std::move(dst));
}

}  // namespace

TEST_CASE("frustum grid basic layout") {
  auto g = make_frustum_grid(2, 2, 16, DepthSpec{1, 1.0, 1.0});
  REQUIRE(g.count() == 4);
  std::vector<std::pair<double, double>> uv;
  for (auto& p : g.points) {
    REQUIRE(p[2] == 1.0);
    REQUIRE(p[3] == 1.0);
    uv.emplace_back(p[0], p[1]);
  }
  REQUIRE(uv == std::vector<std::pair<double, double>>{{8, 8}, {24, 8}, {8, 24}, {24, 24}});
}

TEST_CASE("depth bins are an inclusive linspace") {
  auto d = DepthSpec{64, 1.0, 60.0}.linspace();
  REQUIRE(d.front() == 1.0);
  REQUIRE(d.back() == 60.0);
  double step = d[1] - d[0];
  for (size_t i = 1; i < d.size(); ++i) REQUIRE(d[i] - d[i - 1] == Catch::Approx(step).epsilon(1e-12));
}

TEST_CASE("grid point count and uv recovery") {
  auto g = make_frustum_grid(5, 3, 16, DepthSpec{7, 1.0, 40.0});
  REQUIRE(g.count() == 5 * 3 * 7);
  for (auto& p : g.points) {
    // dividing (u*d, v*d) by d recovers pixel centers exactly
    double u = p[0] / p[2], v = p[1] / p[2];
    REQUIRE(std::fmod(u - 8.0, 16.0) == 0.0);
    REQUIRE(std::fmod(v - 8.0, 16.0) == 0.0);
  }
  REQUIRE_THROWS_WITH(make_frustum_grid(0, 3, 16, DepthSpec{}),
                      Catch::Matchers::ContainsSubstring("positive"));
}

TEST_CASE("unproject with identities is a passthrough") {
  auto g = make_frustum_grid(2, 2, 4, DepthSpec{2, 1.0, 3.0});
  auto intr = CameraIntrinsics::make(1.0, 1.0, 0.0, 0.0);
  auto ext = RigidTransform::identity(frame_cam(0, 0), frame_lidar(0));
  auto c = unproject_to_lidar(g, intr, ext);
  REQUIRE(c.count() == g.count());
  for (int64_t i = 0; i < c.count(); ++i) {
    REQUIRE(c.pts[i].x == Catch::Approx(g.points[i][0]).margin(1e-12));
    REQUIRE(c.pts[i].y == Catch::Approx(g.points[i][1]).margin(1e-12));
    REQUIRE(c.pts[i].z == Catch::Approx(g.points[i][2]).margin(1e-12));
  }
}

TEST_CASE("principal point ray unprojects to the optical axis") {
  // One pixel at (50,50), focal 100, principal point (50,50), depth 10.
  FrustumGrid g;
  g.feat_w = g.feat_h = 1;
  g.stride = 1;
  g.depths = {10.0};
  g.points = {{50.0 * 10, 50.0 * 10, 10.0, 1.0}};
  auto intr = CameraIntrinsics::make(100, 100, 50, 50);
  auto ext = RigidTransform::identity(frame_cam(0, 0), frame_lidar(0));
  auto c = unproject_to_lidar(g, intr, ext);
  REQUIRE(c.pts[0].x == Catch::Approx(0).margin(1e-12));
  REQUIRE(c.pts[0].y == Catch::Approx(0).margin(1e-12));
  REQUIRE(c.pts[0].z == Catch::Approx(10).margin(1e-12));
}

TEST_CASE("unproject/reproject round trip holds for every grid point") {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    auto intr = CameraIntrinsics::make(rng.uniform(60, 300), rng.uniform(60, 300),
                                       rng.uniform(30, 100), rng.uniform(30, 100));
    auto ext = random_se3(rng, frame_cam(0, 5), frame_lidar(5), 3.0);
    auto g = make_frustum_grid(4, 3, 16, DepthSpec{6, 1.0, 55.0});
    auto coords = unproject_to_lidar(g, intr, ext);
    auto lidar_to_cam = ext.inverse();
    for (int64_t i = 0; i < coords.count(); ++i) {
      // forward pinhole oracle: cam point -> (u, v, d)
      Vec3 pc = lidar_to_cam.apply(coords.pts[i]);
      auto uvd = intr.project(pc);
      double u = g.points[i][0] / g.points[i][2];
      double v = g.points[i][1] / g.points[i][2];
      REQUIRE(std::fabs(uvd[0] - u) < 1e-9);
      REQUIRE(std::fabs(uvd[1] - v) < 1e-9);
      REQUIRE(std::fabs(uvd[2] - g.points[i][2]) < 1e-9);
    }
  }
}

TEST_CASE("unproject validates frames and intrinsics") {
  auto g = make_frustum_grid(2, 2, 16, DepthSpec{2, 1.0, 2.0});
  auto intr = CameraIntrinsics::make(100, 100, 50, 50);
  auto wrong = RigidTransform::identity(frame_ego(0), frame_lidar(0));
  REQUIRE_THROWS_WITH(unproject_to_lidar(g, intr, wrong),
                      Catch::Matchers::ContainsSubstring("cam->lidar"));
  REQUIRE_THROWS_WITH(CameraIntrinsics::make(0, 100, 50, 50),
                      Catch::Matchers::ContainsSubstring("focal"));
  CameraIntrinsics singular;
  singular.k(0, 0) = 0.0;  // hand-built degenerate K bypassing make()
  REQUIRE_THROWS_WITH(singular.inverse(), Catch::Matchers::ContainsSubstring("singular"));
}

TEST_CASE("relative lidar transform identity case") {
  auto l2e_t = RigidTransform::identity(frame_lidar(1), frame_ego(1));
  auto e2g_t = RigidTransform::identity(frame_ego(1), frame_global());
  auto l2e_p = RigidTransform::identity(frame_lidar(0), frame_ego(0));
  auto e2g_p = RigidTransform::identity(frame_ego(0), frame_global());
  auto rel = relative_lidar_transform(l2e_t, e2g_t, l2e_p, e2g_p);
  REQUIRE(rel.src_frame == frame_lidar(0));
  REQUIRE(rel.dst_frame == frame_lidar(1));
  for (int i = 0; i < 16; ++i) REQUIRE(rel.m.m[i] == Catch::Approx(Mat4::identity().m[i]).margin(1e-15));
}

TEST_CASE("forward ego translation shifts points backward") {
  auto l2e_t = RigidTransform::identity(frame_lidar(1), frame_ego(1));
  auto l2e_p = RigidTransform::identity(frame_lidar(0), frame_ego(0));
  auto e2g_p = RigidTransform::identity(frame_ego(0), frame_global());
  Mat4 moved = Mat4::identity();
  moved(0, 3) = 1.0;  // ego moved +1 m along global x
  auto e2g_t = RigidTransform::make(moved, frame_ego(1), frame_global());
  auto rel = relative_lidar_transform(l2e_t, e2g_t, l2e_p, e2g_p);
  Vec3 p = rel.apply({5, 0, 0});
  REQUIRE(p.x == Catch::Approx(4.0).margin(1e-12));
  REQUIRE(p.y == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(p.z == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("relative transform equals global-frame round trip on random poses") {
  Rng rng(202);
  for (int trial = 0; trial < 200; ++trial) {
    auto l2e_t = random_se3(rng, frame_lidar(9), frame_ego(9), 2.0);
    auto e2g_t = random_se3(rng, frame_ego(9), frame_global(), 50.0);
    auto l2e_p = random_se3(rng, frame_lidar(4), frame_ego(4), 2.0);
    auto e2g_p = random_se3(rng, frame_ego(4), frame_global(), 50.0);
    auto rel = relative_lidar_transform(l2e_t, e2g_t, l2e_p, e2g_p);
    Vec3 q{rng.uniform(-40, 40), rng.uniform(-40, 40), rng.uniform(-5, 5)};
    // oracle: lidar@prev -> ego@prev -> global -> ego@t -> lidar@t
    Vec3 g = e2g_p.apply(l2e_p.apply(q));
    Vec3 want = l2e_t.inverse().apply(e2g_t.inverse().apply(g));
    Vec3 got = rel.apply(q);
    REQUIRE((got - want).norm() < 1e-9);
  }
}

TEST_CASE("relative transform is exactly identity when poses coincide") {
  Rng rng(303);
  for (int trial = 0; trial < 50; ++trial) {
    auto l2e = random_se3(rng, frame_lidar(3), frame_ego(3), 2.0);
    auto e2g = random_se3(rng, frame_ego(3), frame_global(), 30.0);
    auto l2e_p = RigidTransform::make(l2e.m, frame_lidar(2), frame_ego(2));
    auto e2g_p = RigidTransform::make(e2g.m, frame_ego(2), frame_global());
    auto rel = relative_lidar_transform(l2e, e2g, l2e_p, e2g_p);
    for (int i = 0; i < 16; ++i)
      REQUIRE(std::fabs(rel.m.m[i] - Mat4::identity().m[i]) < 1e-12);
  }
}

TEST_CASE("relative transform rejects broken frame chains") {
  auto l2e_t = RigidTransform::identity(frame_lidar(1), frame_ego(1));
  auto e2g_t = RigidTransform::identity(frame_ego(1), frame_global());
  auto l2e_p = RigidTransform::identity(frame_lidar(0), frame_ego(0));
  auto bad = RigidTransform::identity(frame_global(), frame_ego(0));  // reversed
  REQUIRE_THROWS_WITH(relative_lidar_transform(l2e_t, e2g_t, l2e_p, bad),
                      Catch::Matchers::ContainsSubstring("relative_lidar_transform"));
}

TEST_CASE("align_coords identity is bit exact and translation shifts") {
  Coords3D c;
  c.feat_w = c.feat_h = 1;
  c.depth_bins = 1;
  c.pts = {{5, 0, 0}};
  c.mask = {1};
  c.frame = frame_lidar(0);
  auto id = RigidTransform::identity(frame_lidar(0), frame_lidar(1));
  auto out = align_coords(c, id);
  REQUIRE(out.pts[0].x == 5.0);
  REQUIRE(out.frame == frame_lidar(1));

  Mat4 t = Mat4::identity();
  t(0, 3) = -1.0;
  auto shift = RigidTransform::make(t, frame_lidar(0), frame_lidar(1));
  REQUIRE(align_coords(c, shift).pts[0].x == Catch::Approx(4.0));

  auto wrong = RigidTransform::identity(frame_lidar(7), frame_lidar(8));
  REQUIRE_THROWS_WITH(align_coords(c, wrong), Catch::Matchers::ContainsSubstring("align_coords"));
}

TEST_CASE("static world points align across simulated ego motion") {
  Rng rng(404);
  for (int trial = 0; trial < 50; ++trial) {
    auto l2e = random_se3(rng, frame_lidar(0), frame_ego(0), 1.0);
    auto l2e_t = RigidTransform::make(l2e.m, frame_lidar(1), frame_ego(1));
    auto e2g_p = random_se3(rng, frame_ego(0), frame_global(), 30.0);
    auto e2g_t = random_se3(rng, frame_ego(1), frame_global(), 30.0);
    auto rel = relative_lidar_transform(l2e_t, e2g_t, l2e, e2g_p);

    Vec3 world{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-3, 3)};
    Vec3 in_prev = l2e.inverse().apply(e2g_p.inverse().apply(world));
    Vec3 in_cur = l2e_t.inverse().apply(e2g_t.inverse().apply(world));

    Coords3D c;
    c.feat_w = c.feat_h = c.depth_bins = 1;
    c.pts = {in_prev};
    c.mask = {1};
    c.frame = frame_lidar(0);
    auto aligned = align_coords(c, rel);
    REQUIRE((aligned.pts[0] - in_cur).norm() < 1e-6);
  }
}

TEST_CASE("alignment preserves pairwise distances") {
  Rng rng(505);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_se3(rng, frame_lidar(0), frame_lidar(1), 20.0);
    Vec3 p{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-5, 5)};
    Vec3 q{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-5, 5)};
    double before = (p - q).norm();
    double after = (t.apply(p) - t.apply(q)).norm();
    REQUIRE(std::fabs(before - after) < 1e-9);
  }
}

TEST_CASE("compose with inverse is identity for random transforms") {
  Rng rng(606);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_se3(rng, frame_lidar(0), frame_ego(0), 30.0);
    auto id = compose(t.inverse(), t);
    for (int i = 0; i < 16; ++i)
      REQUIRE(std::fabs(id.m.m[i] - Mat4::identity().m[i]) < 1e-9);
    REQUIRE(id.src_frame == frame_lidar(0));
    REQUIRE(id.dst_frame == frame_lidar(0));
  }
  auto a = RigidTransform::identity(frame_ego(0), frame_global());
  auto b = RigidTransform::identity(frame_lidar(1), frame_ego(1));
  REQUIRE_THROWS_WITH(compose(a, b), Catch::Matchers::ContainsSubstring("frame mismatch"));
}

TEST_CASE("rigid transform validation rejects bad matrices") {
  Mat4 scaled = Mat4::identity();
  scaled(0, 0) = 2.0;
  REQUIRE_THROWS_WITH(RigidTransform::make(scaled, "a", "b"),
                      Catch::Matchers::ContainsSubstring("orthonormal"));
  Mat4 reflected = Mat4::identity();
  reflected(0, 0) = -1.0;
  REQUIRE_THROWS_WITH(RigidTransform::make(reflected, "a", "b"),
                      Catch::Matchers::ContainsSubstring("determinant"));
  Mat4 bad_row = Mat4::identity();
  bad_row(3, 0) = 0.5;
  REQUIRE_THROWS_WITH(RigidTransform::make(bad_row, "a", "b"),
                      Catch::Matchers::ContainsSubstring("bottom row"));
}

TEST_CASE("normalize_coords maps roi to unit cube with mask") {
  Roi roi;  // defaults: x,y in [-61.2, 61.2], z in [-10, 10]
  Coords3D c;
  c.feat_w = 3;
  c.feat_h = 1;
  c.depth_bins = 1;
  c.pts = {{0, 0, 0}, {-61.2, -61.2, -10}, {62.2, 0, 0}};
  c.mask = {1, 1, 1};
  c.frame = frame_lidar(0);
  auto n = normalize_coords(c, roi);
  REQUIRE(n.normalized);
  REQUIRE(n.pts[0].x == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(n.pts[0].y == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(n.pts[0].z == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(n.mask[0] == 1);
  REQUIRE(n.pts[1].x == 0.0);
  REQUIRE(n.pts[1].y == 0.0);
  REQUIRE(n.pts[1].z == 0.0);
  REQUIRE(n.mask[1] == 1);  // corner is inside
  REQUIRE(n.pts[2].x == 1.0);  // clamped
  REQUIRE(n.mask[2] == 0);

  Roi degenerate;
  degenerate.x_min = degenerate.x_max = 1.0;
  REQUIRE_THROWS_WITH(normalize_coords(c, degenerate),
                      Catch::Matchers::ContainsSubstring("degenerate"));
}
