#pragma once

// Brute-force reference implementations used by the unit and acceptance
// tests. They share no code with the library beyond the data types.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "perldiff/geometry.hpp"
#include "perldiff/rng.hpp"

namespace perldiff::oracle {

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d dir;  // camera-space z component is 1, so the ray parameter is depth
};

inline Ray pixel_ray(const CameraModel& cam, double u, double v) {
  const Eigen::Matrix3d r = cam.extrinsics.block<3, 3>(0, 0);
  const Eigen::Vector3d t = cam.extrinsics.block<3, 1>(0, 3);
  const Eigen::Vector3d d_cam((u - cam.intrinsics(0, 2)) / cam.intrinsics(0, 0),
                              (v - cam.intrinsics(1, 2)) / cam.intrinsics(1, 1), 1.0);
  return {-r.transpose() * t, r.transpose() * d_cam};
}

// Does the ray meet the box (half extents grown by `slack`) at depth > near?
inline bool ray_hits_box(const Ray& ray, const Box3D& box, double near, double slack) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  auto to_local = [&](const Eigen::Vector3d& w) { return Eigen::Vector3d(c * w.x() + s * w.y(), -s * w.x() + c * w.y(), w.z()); };
  const Eigen::Vector3d o = to_local(ray.origin - box.center);
  const Eigen::Vector3d d = to_local(ray.dir);
  double lo = near, hi = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double half = 0.5 * box.size[a] + slack;
    if (std::abs(d[a]) < 1e-300) {
      if (std::abs(o[a]) > half) return false;
      continue;
    }
    double t0 = (-half - o[a]) / d[a], t1 = (half - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
    if (lo > hi) return false;
  }
  return true;
}

// Winding number by summed signed angles; nonzero means inside.
inline bool inside_by_winding(const Eigen::Vector2d& p, const std::vector<Eigen::Vector2d>& poly) {
  double total = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Eigen::Vector2d a = poly[i] - p, b = poly[(i + 1) % poly.size()] - p;
    total += std::atan2(a.x() * b.y() - a.y() * b.x(), a.dot(b));
  }
  return std::abs(total) > std::numbers::pi;
}

struct MaskComparison {
  int agree = 0;
  int disagree = 0;
  int unexplained = 0;  // disagreements that are not boundary ties
  int ones = 0;
};

// Compares a box mask against per-pixel ray casts. A disagreement counts as a
// boundary pixel when shrinking or growing the box by `slack` flips the oracle.
inline MaskComparison compare_box_mask(const Tensor& mask, const Box3D& box, const CameraModel& cam,
                                       double slack = 1e-6) {
  MaskComparison out;
  for (int i = 0; i < cam.height; ++i) {
    for (int j = 0; j < cam.width; ++j) {
      const Ray ray = pixel_ray(cam, j + 0.5, i + 0.5);
      const bool truth = ray_hits_box(ray, box, cam.near_plane, 0.0);
      const bool got = mask[static_cast<std::size_t>(i * cam.width + j)] > 0.5;
      out.ones += got;
      if (truth == got) {
        ++out.agree;
        continue;
      }
      ++out.disagree;
      const bool grown = ray_hits_box(ray, box, cam.near_plane * (1 - 1e-9), slack);
      const bool shrunk = ray_hits_box(ray, box, cam.near_plane * (1 + 1e-9), -slack);
      if (grown == shrunk) ++out.unexplained;
    }
  }
  return out;
}

// Road oracle: pixel-center ray hits z = 0 beyond the near plane inside any
// polygon by winding number.
inline Tensor road_mask_oracle(const std::vector<GroundPolygon>& polygons, const CameraModel& cam) {
  Tensor out({cam.height, cam.width});
  for (int i = 0; i < cam.height; ++i) {
    for (int j = 0; j < cam.width; ++j) {
      const Ray ray = pixel_ray(cam, j + 0.5, i + 0.5);
      if (ray.dir.z() == 0.0) continue;
      const double s = -ray.origin.z() / ray.dir.z();
      if (!(s > cam.near_plane)) continue;
      const Eigen::Vector3d hit = ray.origin + s * ray.dir;
      for (const auto& poly : polygons) {
        if (inside_by_winding(hit.head<2>(), poly)) {
          out[static_cast<std::size_t>(i * cam.width + j)] = 1.0;
          break;
        }
      }
    }
  }
  return out;
}

inline CameraModel random_camera(CounterRng& rng) {
  const int w = rng.uniform_int(6, 48), h = rng.uniform_int(6, 40);
  const double hfov = rng.uniform(0.6, 1.9);
  const Eigen::Vector3d pos(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0.3, 3.0));
  return make_camera("cam", w, h, hfov, pos, rng.uniform(-3.1, 3.1), rng.uniform(-0.3, 0.7));
}

// Boxes scattered around the camera, including ones straddling or behind the
// near plane.
inline Box3D random_box_near(const CameraModel& cam, CounterRng& rng) {
  const Eigen::Matrix3d r = cam.extrinsics.block<3, 3>(0, 0);
  const Eigen::Vector3d center = cam.center_world();
  const Eigen::Vector3d offset_cam(rng.uniform(-4, 4), rng.uniform(-2, 2), rng.uniform(-2, 14));
  Box3D box;
  box.center = center + r.transpose() * offset_cam;
  box.size = Eigen::Vector3d(rng.uniform(0.3, 6.0), rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0));
  box.yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
  box.category = "car";
  return box;
}

// Simple polygon: star-shaped around a random center with sorted angles, so
// it may be non-convex.
inline GroundPolygon random_ground_polygon(CounterRng& rng, const Eigen::Vector2d& around) {
  const int k = rng.uniform_int(3, 9);
  std::vector<double> angles(static_cast<std::size_t>(k));
  for (auto& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::sort(angles.begin(), angles.end());
  const Eigen::Vector2d c = around + Eigen::Vector2d(rng.uniform(-8, 8), rng.uniform(-8, 8));
  GroundPolygon poly;
  for (double a : angles) {
    const double rad = rng.uniform(1.0, 15.0);
    poly.emplace_back(c.x() + rad * std::cos(a), c.y() + rad * std::sin(a));
  }
  return poly;
}

}  // namespace perldiff::oracle
