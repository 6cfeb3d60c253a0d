#include <algorithm>
#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "support.hpp"

using namespace perldiff;

namespace {

CameraModel identity_camera(int w, int h, double f, double cx, double cy) {
  CameraModel cam;
  cam.name = "id";
  cam.width = w;
  cam.height = h;
  cam.intrinsics << f, 0, cx, 0, f, cy, 0, 0, 1;
  return cam;
}

double mask_sum(const Tensor& m) {
  double s = 0.0;
  for (double v : m.values()) s += v;
  return s;
}

}  // namespace

TEST_SUITE("geometry") {
  TEST_CASE("box corners follow the documented sign order") {
    Box3D box;
    box.size = {2, 2, 2};
    const auto c = box_corners(box);
    for (int i = 0; i < 8; ++i) {
      const Eigen::Vector3d expect((i & 4) ? 1 : -1, (i & 2) ? 1 : -1, (i & 1) ? 1 : -1);
      CHECK((c[static_cast<std::size_t>(i)] - expect).norm() < 1e-15);
    }
    box.size = {4, 2, 2};
    box.yaw = std::numbers::pi / 2;
    const auto r = box_corners(box);
    for (int i = 0; i < 8; ++i) {
      const double l = (i & 4) ? 2 : -2, w = (i & 2) ? 1 : -1, h = (i & 1) ? 1 : -1;
      // (l, w) rotated by 90 degrees is (-w, l).
      CHECK((r[static_cast<std::size_t>(i)] - Eigen::Vector3d(-w, l, h)).norm() < 1e-12);
    }
    Box3D a = box, b = box;
    a.yaw = 0.7;
    b.yaw = 0.7 + 2 * std::numbers::pi;
    const auto ca = box_corners(a), cb = box_corners(b);
    for (std::size_t i = 0; i < 8; ++i) CHECK((ca[i] - cb[i]).norm() < 1e-12);
  }

  TEST_CASE("yaw normalization") {
    CHECK(normalize_yaw(0.0) == 0.0);
    CHECK(normalize_yaw(std::numbers::pi) == doctest::Approx(-std::numbers::pi));
    CHECK(normalize_yaw(-std::numbers::pi) == doctest::Approx(-std::numbers::pi));
    CounterRng rng(1, "yaw");
    for (int i = 0; i < 200; ++i) {
      const double y = rng.uniform(-40, 40);
      const double n = normalize_yaw(y);
      CHECK(n >= -std::numbers::pi);
      CHECK(n < std::numbers::pi);
      CHECK(std::abs(std::remainder(y - n, 2 * std::numbers::pi)) < 1e-9);
    }
  }

  TEST_CASE("project_points examples") {
    const CameraModel cam = identity_camera(4, 4, 1.0, 0.0, 0.0);
    const std::vector<Eigen::Vector3d> pts = {{0, 0, 2}, {0, 0, -1}};
    const Projection p = project_points(pts, cam);
    CHECK(p.valid[0]);
    CHECK(p.pixels[0] == Eigen::Vector2d(0, 0));
    CHECK(p.depths[0] == 2.0);
    CHECK_FALSE(p.valid[1]);

    const CameraModel c100 = identity_camera(100, 100, 100.0, 50.0, 50.0);
    const std::vector<Eigen::Vector3d> one = {{1, 0, 2}};
    CHECK(project_points(one, c100).pixels[0].x() == doctest::Approx(100.0));
  }

  TEST_CASE("unproject inverts project") {
    CounterRng rng(2, "unproject");
    for (int trial = 0; trial < 200; ++trial) {
      const CameraModel cam = oracle::random_camera(rng);
      const std::vector<Eigen::Vector3d> pts = {cam.center_world() + Eigen::Vector3d(rng.uniform(-9, 9), rng.uniform(-9, 9), rng.uniform(-3, 3))};
      const Projection p = project_points(pts, cam);
      if (!p.valid[0]) continue;
      CHECK((unproject(p.pixels[0], p.depths[0], cam) - pts[0]).norm() < 1e-9);
    }
  }

  TEST_CASE("camera validation") {
    CameraModel cam = identity_camera(4, 4, 1.0, 2.0, 2.0);
    CHECK_NOTHROW(cam.validate());
    cam.intrinsics(0, 0) = 0.0;
    CHECK_THROWS_AS(cam.validate(), GeometryError);
    cam = identity_camera(4, 4, 1.0, 2.0, 2.0);
    cam.extrinsics(0, 0) = 1.5;
    CHECK_THROWS_AS(cam.validate(), GeometryError);
    cam = identity_camera(4, 4, 1.0, 2.0, 2.0);
    cam.extrinsics(0, 0) = -1.0;  // reflection
    CHECK_THROWS_AS(cam.validate(), GeometryError);
    cam = identity_camera(0, 4, 1.0, 2.0, 2.0);
    CHECK_THROWS_AS(cam.validate(), GeometryError);
    Box3D box;
    box.size = {1, 0, 1};
    CHECK_THROWS_AS(box.validate(), GeometryError);
  }

  TEST_CASE("axis-aligned box covers exactly sixteen pixels") {
    const CameraModel cam = identity_camera(8, 8, 8.0, 4.0, 4.0);
    Box3D box;
    box.center = {0, 0, 5};
    box.size = {2, 2, 2};
    const Tensor m = rasterize_box_mask(box, cam);
    CHECK(mask_sum(m) == 16.0);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) {
        const bool in = i >= 2 && i <= 5 && j >= 2 && j <= 5;
        CHECK(m.at(i, j) == (in ? 1.0 : 0.0));
      }
  }

  TEST_CASE("frustum-enclosing and behind-camera boxes") {
    const CameraModel cam = identity_camera(8, 6, 6.0, 4.0, 3.0);
    Box3D around;
    around.size = {50, 50, 50};
    CHECK(mask_sum(rasterize_box_mask(around, cam)) == 48.0);
    Box3D behind;
    behind.center = {0, 0, -4};
    CHECK(mask_sum(rasterize_box_mask(behind, cam)) == 0.0);
    CHECK(projected_box_hull(behind, cam).empty());
  }

  TEST_CASE("box masks match per-pixel ray casting") {
    CounterRng rng(3, "box-oracle");
    long agree = 0, total = 0;
    int nonempty = 0, straddling = 0;
    for (int trial = 0; trial < 300; ++trial) {
      const CameraModel cam = oracle::random_camera(rng);
      const Box3D box = oracle::random_box_near(cam, rng);
      const Tensor m = rasterize_box_mask(box, cam);
      const auto cmp = oracle::compare_box_mask(m, box, cam);
      CAPTURE(trial);
      CHECK(cmp.unexplained == 0);
      agree += cmp.agree;
      total += cmp.agree + cmp.disagree;
      nonempty += cmp.ones > 0;
      const auto p = project_points(box_corners(box), cam);
      straddling += std::count(p.valid.begin(), p.valid.end(), true) % 8 != 0;
    }
    CHECK(static_cast<double>(agree) / static_cast<double>(total) >= 0.999);
    CHECK(nonempty > 100);
    CHECK(straddling > 20);
  }

  TEST_CASE("hull fill ignores corner order") {
    CounterRng rng(4, "perm");
    for (int trial = 0; trial < 50; ++trial) {
      const CameraModel cam = oracle::random_camera(rng);
      const Box3D box = oracle::random_box_near(cam, rng);
      const auto p = project_points(box_corners(box), cam);
      if (std::count(p.valid.begin(), p.valid.end(), true) != 8) continue;
      std::vector<Eigen::Vector2d> pts = p.pixels;
      const Tensor ref = fill_convex_polygon(convex_hull(pts), cam.width, cam.height);
      for (int k = 0; k < 5; ++k) {
        for (std::size_t i = pts.size() - 1; i > 0; --i) std::swap(pts[i], pts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
        CHECK(fill_convex_polygon(convex_hull(pts), cam.width, cam.height) == ref);
      }
      CHECK(ref == rasterize_box_mask(box, cam));
    }
  }

  TEST_CASE("road masks match ray-plane casting") {
    CounterRng rng(5, "road-oracle");
    long mismatched = 0, ones = 0;
    for (int trial = 0; trial < 250; ++trial) {
      const CameraModel cam = oracle::random_camera(rng);
      std::vector<GroundPolygon> polys;
      const int n = rng.uniform_int(0, 3);
      const Eigen::Vector2d c = cam.center_world().head<2>();
      for (int k = 0; k < n; ++k) polys.push_back(oracle::random_ground_polygon(rng, c));
      const Tensor got = rasterize_road_mask(polys, cam);
      const Tensor want = oracle::road_mask_oracle(polys, cam);
      CAPTURE(trial);
      CHECK(got == want);
      mismatched += got != want;
      ones += static_cast<long>(mask_sum(want));
    }
    CHECK(mismatched == 0);
    CHECK(ones > 1000);
  }

  TEST_CASE("road mask examples") {
    const CameraModel cam = make_camera("c", 24, 16, 1.2, {0, 0, 1.5}, 0.3, 0.2);
    CHECK(mask_sum(rasterize_road_mask({}, cam)) == 0.0);
    // Square covering all ground the camera can see.
    const std::vector<GroundPolygon> all = {{{-1e4, -1e4}, {1e4, -1e4}, {1e4, 1e4}, {-1e4, 1e4}}};
    const Tensor m = rasterize_road_mask(all, cam);
    const double horizon = cam.cy() - cam.fy() * std::tan(0.2);
    for (int i = 0; i < cam.height; ++i)
      for (int j = 0; j < cam.width; ++j) CHECK(m.at(i, j) == (i + 0.5 > horizon ? 1.0 : 0.0));
    // Polygon behind the camera (heading 0.3 rad).
    const Eigen::Vector2d back(-20 * std::cos(0.3), -20 * std::sin(0.3));
    const std::vector<GroundPolygon> behind = {{back + Eigen::Vector2d(-5, -5), back + Eigen::Vector2d(5, -5),
                                                back + Eigen::Vector2d(5, 5), back + Eigen::Vector2d(-5, 5)}};
    CHECK(mask_sum(rasterize_road_mask(behind, cam)) == 0.0);
  }

  TEST_CASE("even-odd rule") {
    const std::vector<Eigen::Vector2d> sq = {{0, 0}, {2, 0}, {2, 2}, {0, 2}};
    CHECK(point_in_polygon_even_odd({1, 1}, sq));
    CHECK_FALSE(point_in_polygon_even_odd({3, 1}, sq));
    // Concave "C" shape.
    const std::vector<Eigen::Vector2d> c = {{0, 0}, {3, 0}, {3, 1}, {1, 1}, {1, 2}, {3, 2}, {3, 3}, {0, 3}};
    CHECK(point_in_polygon_even_odd({0.5, 1.5}, c));
    CHECK_FALSE(point_in_polygon_even_odd({2, 1.5}, c));
  }

  TEST_CASE("fourier embedding examples") {
    const CameraModel cam = identity_camera(48, 32, 40.0, 24.0, 16.0);
    BoxCorners2D zero;
    for (auto& p : zero.pixels) p = Eigen::Vector2d::Zero();
    zero.valid.fill(true);
    const std::vector<BoxCorners2D> one = {zero};
    const Tensor e = fourier_embed(one, cam);
    CHECK(e.dims() == Dims{1, 256});
    for (int i = 0; i < 256; ++i) CHECK(e.at(0, i) == (i % 2 == 0 ? 0.0 : 1.0));

    BoxCorners2D half = zero;
    half.pixels[0] = Eigen::Vector2d(24.0, 0.0);  // u / W = 0.5
    const std::vector<BoxCorners2D> h = {half};
    const Tensor eh = fourier_embed(h, cam);
    CHECK(eh.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(eh.at(0, 1)) < 1e-15);

    BoxCorners2D hidden = half;
    hidden.valid[0] = false;
    const std::vector<BoxCorners2D> hv = {hidden};
    CHECK(fourier_embed(hv, cam) == e);
  }

  TEST_CASE("fourier embedding is deterministic and Lipschitz") {
    CounterRng rng(6, "fourier");
    const CameraModel cam = identity_camera(48, 32, 40.0, 24.0, 16.0);
    const double bound = 2 * std::numbers::pi * kFourierBands * std::pow(2.0, kFourierBands - 1);
    for (int trial = 0; trial < 100; ++trial) {
      BoxCorners2D a;
      a.valid.fill(true);
      for (auto& p : a.pixels) p = Eigen::Vector2d(rng.uniform(0, 48), rng.uniform(0, 32));
      BoxCorners2D b = a;
      const double dx = rng.uniform(-1e-3, 1e-3);
      const int corner = rng.uniform_int(0, 7);
      b.pixels[static_cast<std::size_t>(corner)].x() += dx * cam.width;
      const std::vector<BoxCorners2D> va = {a}, vb = {b};
      const Tensor ea = fourier_embed(va, cam);
      CHECK(ea == fourier_embed(va, cam));
      CHECK(max_abs_diff(ea, fourier_embed(vb, cam)) <= bound * std::abs(dx) + 1e-12);
    }
  }

  TEST_CASE("downsample examples") {
    const Tensor ones({8, 12}, 1.0);
    CHECK(downsample_mask(ones, 2) == Tensor({4, 6}, 1.0));
    CHECK(downsample_mask(ones, 4) == Tensor({2, 3}, 1.0));
    const Tensor three({2, 2}, std::vector<double>{1, 1, 1, 0});
    CHECK(downsample_mask(three, 2) == Tensor({1, 1}, std::vector<double>{0.75}));
    CounterRng rng(7, "ds");
    const Tensor r = test::random_tensor({6, 6}, rng, 0.0, 1.0);
    CHECK(downsample_mask(r, 1) == r);
    CHECK_THROWS_AS(downsample_mask(ones, 3), ShapeError);
  }
}
