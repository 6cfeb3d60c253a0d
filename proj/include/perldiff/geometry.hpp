#pragma once

#include <Eigen/Core>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "perldiff/tensor.hpp"

namespace perldiff {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Pinhole camera. Extrinsics map world to camera coordinates; the camera
// frame is x right, y down, z forward (depth).
struct CameraModel {
  std::string name;
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix4d extrinsics = Eigen::Matrix4d::Identity();
  int width = 0;
  int height = 0;
  double near_plane = 0.05;

  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }
  Eigen::Matrix3d rotation() const { return extrinsics.block<3, 3>(0, 0); }
  Eigen::Vector3d translation() const { return extrinsics.block<3, 1>(0, 3); }
  Eigen::Vector3d center_world() const { return -rotation().transpose() * translation(); }
  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const { return rotation() * world + translation(); }

  // Throws GeometryError when an invariant is violated.
  void validate() const;
};

// Camera at `position` looking along heading `yaw` (about world +z, x forward,
// y left) tilted down by `pitch`, with horizontal field of view `hfov`.
CameraModel make_camera(std::string name, int width, int height, double hfov_rad, const Eigen::Vector3d& position,
                        double yaw, double pitch);

struct Box3D {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();  // length (heading), width, height
  double yaw = 0.0;
  std::string category;

  void validate() const;
};

// Wraps an angle into [-pi, pi).
double normalize_yaw(double yaw);

// The eight cuboid vertices. Index bits (4, 2, 1) select the sign of the
// (length, width, height) half-extent, 0 = negative, so corner 0 is (-,-,-)
// and corner 7 is (+,+,+).
std::array<Eigen::Vector3d, 8> box_corners(const Box3D& box);

struct Projection {
  std::vector<Eigen::Vector2d> pixels;  // undefined where !valid
  std::vector<double> depths;
  std::vector<bool> valid;              // depth > near_plane
};

Projection project_points(std::span<const Eigen::Vector3d> world, const CameraModel& cam);
Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth, const CameraModel& cam);

// 2D convex hull, counter-clockwise in (u, v), collinear points dropped.
std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> points);

// Projected footprint of the box after clipping its edges against the near
// plane: the convex hull of the surviving projected vertices. Empty when no
// geometry survives.
std::vector<Eigen::Vector2d> projected_box_hull(const Box3D& box, const CameraModel& cam);

// Pixel (row i, col j) has center (j + 0.5, i + 0.5); it is set when the center
// lies inside or on the hull.
Tensor fill_convex_polygon(std::span<const Eigen::Vector2d> hull, int width, int height);

// Binary [H, W] mask of the box's projected footprint.
Tensor rasterize_box_mask(const Box3D& box, const CameraModel& cam);

using GroundPolygon = std::vector<Eigen::Vector2d>;  // (x, y) on the z = 0 plane

// Binary [H, W] mask: the pixel-center ray hits z = 0 beyond the near plane
// inside any polygon (even-odd rule per polygon).
Tensor rasterize_road_mask(std::span<const GroundPolygon> polygons, const CameraModel& cam);

bool point_in_polygon_even_odd(const Eigen::Vector2d& p, std::span<const Eigen::Vector2d> polygon);

inline constexpr int kFourierBands = 8;
inline constexpr int kFourierWidth = 8 * 2 * 2 * kFourierBands;  // 256

// Projected corners of one box in one camera: 8 pixels plus validity.
struct BoxCorners2D {
  std::array<Eigen::Vector2d, 8> pixels;
  std::array<bool, 8> valid{};
};

BoxCorners2D project_box_corners(const Box3D& box, const CameraModel& cam);

// [M, 256]: per box, for each of the 16 normalized coordinates (u/W, v/H per
// corner in corner order) and k = 0..7, the pair sin(2^k pi x), cos(2^k pi x).
// Invalid corners contribute x = 0.
Tensor fourier_embed(std::span<const BoxCorners2D> corners, const CameraModel& cam);

// Area average over factor x factor blocks of the trailing two dims.
Tensor downsample_mask(const Tensor& mask, int factor);

// Per-camera road map M_s and per-box maps M_b with slot validity.
struct PerLMaskSet {
  Tensor road;                // [H, W]
  Tensor boxes;               // [M, H, W]
  std::vector<bool> valid;    // [M], valid slots come first

  int slots() const { return static_cast<int>(valid.size()); }
  int count_valid() const;
  PerLMaskSet downsampled(int factor) const;
};

}  // namespace perldiff
