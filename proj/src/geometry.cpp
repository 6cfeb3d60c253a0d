#include "perldiff/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace perldiff {

void CameraModel::validate() const {
  if (width <= 0 || height <= 0) throw GeometryError("camera '" + name + "': width and height must be positive");
  if (!(fx() > 0.0) || !(fy() > 0.0)) throw GeometryError("camera '" + name + "': fx and fy must be positive");
  if (intrinsics(0, 1) != 0.0 || intrinsics(1, 0) != 0.0 || intrinsics(2, 0) != 0.0 || intrinsics(2, 1) != 0.0 ||
      intrinsics(2, 2) != 1.0) {
    throw GeometryError("camera '" + name + "': intrinsics must be a zero-skew pinhole matrix");
  }
  const Eigen::Matrix3d r = rotation();
  if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
      std::abs(r.determinant() - 1.0) > 1e-6) {
    throw GeometryError("camera '" + name + "': extrinsic rotation is not a proper rotation");
  }
  const Eigen::RowVector4d last = extrinsics.row(3);
  if (last != Eigen::RowVector4d(0, 0, 0, 1)) {
    throw GeometryError("camera '" + name + "': extrinsics last row must be (0, 0, 0, 1)");
  }
  if (!(near_plane > 0.0)) throw GeometryError("camera '" + name + "': near plane must be positive");
}

CameraModel make_camera(std::string name, int width, int height, double hfov_rad, const Eigen::Vector3d& position,
                        double yaw, double pitch) {
  const Eigen::Vector3d forward(std::cos(pitch) * std::cos(yaw), std::cos(pitch) * std::sin(yaw), -std::sin(pitch));
  const Eigen::Vector3d right(std::sin(yaw), -std::cos(yaw), 0.0);
  const Eigen::Vector3d down = forward.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right;
  r.row(1) = down;
  r.row(2) = forward;

  CameraModel cam;
  cam.name = std::move(name);
  cam.width = width;
  cam.height = height;
  const double f = 0.5 * width / std::tan(0.5 * hfov_rad);
  cam.intrinsics << f, 0.0, 0.5 * width, 0.0, f, 0.5 * height, 0.0, 0.0, 1.0;
  cam.extrinsics.setIdentity();
  cam.extrinsics.block<3, 3>(0, 0) = r;
  cam.extrinsics.block<3, 1>(0, 3) = -r * position;
  cam.validate();
  return cam;
}

double normalize_yaw(double yaw) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double y = std::fmod(yaw + std::numbers::pi, two_pi);
  if (y < 0.0) y += two_pi;
  y -= std::numbers::pi;
  return y >= std::numbers::pi ? y - two_pi : y;
}

void Box3D::validate() const {
  if (!(size.x() > 0.0 && size.y() > 0.0 && size.z() > 0.0)) {
    throw GeometryError("box of category '" + category + "': size components must be positive");
  }
  if (!center.allFinite() || !std::isfinite(yaw)) throw GeometryError("box pose must be finite");
}

std::array<Eigen::Vector3d, 8> box_corners(const Box3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  std::array<Eigen::Vector3d, 8> out;
  for (int i = 0; i < 8; ++i) {
    const double dl = ((i & 4) ? 0.5 : -0.5) * box.size.x();
    const double dw = ((i & 2) ? 0.5 : -0.5) * box.size.y();
    const double dh = ((i & 1) ? 0.5 : -0.5) * box.size.z();
    out[static_cast<std::size_t>(i)] = box.center + Eigen::Vector3d(c * dl - s * dw, s * dl + c * dw, dh);
  }
  return out;
}

Projection project_points(std::span<const Eigen::Vector3d> world, const CameraModel& cam) {
  Projection p;
  p.pixels.resize(world.size(), Eigen::Vector2d::Zero());
  p.depths.resize(world.size());
  p.valid.resize(world.size());
  for (std::size_t i = 0; i < world.size(); ++i) {
    const Eigen::Vector3d pc = cam.to_camera(world[i]);
    p.depths[i] = pc.z();
    p.valid[i] = pc.z() > cam.near_plane;
    if (p.valid[i]) {
      p.pixels[i] = Eigen::Vector2d(cam.fx() * pc.x() / pc.z() + cam.cx(), cam.fy() * pc.y() / pc.z() + cam.cy());
    }
  }
  return p;
}

Eigen::Vector3d unproject(const Eigen::Vector2d& pixel, double depth, const CameraModel& cam) {
  const Eigen::Vector3d pc((pixel.x() - cam.cx()) / cam.fx() * depth, (pixel.y() - cam.cy()) / cam.fy() * depth, depth);
  return cam.rotation().transpose() * (pc - cam.translation());
}

namespace {

double cross2(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

}  // namespace

std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Eigen::Vector2d> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross2(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

std::vector<Eigen::Vector2d> projected_box_hull(const Box3D& box, const CameraModel& cam) {
  const auto corners = box_corners(box);
  std::array<Eigen::Vector3d, 8> cam_pts;
  for (std::size_t i = 0; i < 8; ++i) cam_pts[i] = cam.to_camera(corners[i]);

  std::vector<Eigen::Vector3d> kept;
  const double near = cam.near_plane;
  for (std::size_t i = 0; i < 8; ++i) {
    if (cam_pts[i].z() > near) kept.push_back(cam_pts[i]);
  }
  // Edges join corners whose indices differ in exactly one bit.
  for (int i = 0; i < 8; ++i) {
    for (int bit : {1, 2, 4}) {
      const int j = i ^ bit;
      if (j < i) continue;
      const Eigen::Vector3d& a = cam_pts[static_cast<std::size_t>(i)];
      const Eigen::Vector3d& b = cam_pts[static_cast<std::size_t>(j)];
      const bool ia = a.z() > near, ib = b.z() > near;
      if (ia == ib) continue;
      const double t = (near - a.z()) / (b.z() - a.z());
      Eigen::Vector3d p = a + t * (b - a);
      p.z() = near;
      kept.push_back(p);
    }
  }
  std::vector<Eigen::Vector2d> pix;
  pix.reserve(kept.size());
  for (const auto& p : kept) {
    pix.emplace_back(cam.fx() * p.x() / p.z() + cam.cx(), cam.fy() * p.y() / p.z() + cam.cy());
  }
  auto hull = convex_hull(std::move(pix));
  if (hull.size() < 3) hull.clear();
  return hull;
}

Tensor fill_convex_polygon(std::span<const Eigen::Vector2d> hull, int width, int height) {
  Tensor mask({height, width});
  if (hull.size() < 3) return mask;
  double umin = hull[0].x(), umax = umin, vmin = hull[0].y(), vmax = vmin;
  for (const auto& p : hull) {
    umin = std::min(umin, p.x());
    umax = std::max(umax, p.x());
    vmin = std::min(vmin, p.y());
    vmax = std::max(vmax, p.y());
  }
  const int j0 = std::max(0, static_cast<int>(std::floor(umin - 0.5)));
  const int j1 = std::min(width - 1, static_cast<int>(std::ceil(umax - 0.5)));
  const int i0 = std::max(0, static_cast<int>(std::floor(vmin - 0.5)));
  const int i1 = std::min(height - 1, static_cast<int>(std::ceil(vmax - 0.5)));
  const std::size_t n = hull.size();
  for (int i = i0; i <= i1; ++i) {
    for (int j = j0; j <= j1; ++j) {
      const Eigen::Vector2d p(j + 0.5, i + 0.5);
      bool inside = true;
      for (std::size_t e = 0; e < n && inside; ++e) {
        const auto& a = hull[e];
        const auto& b = hull[(e + 1) % n];
        const Eigen::Vector2d ab = b - a;
        // Scale-aware tolerance so points on an edge count as inside.
        const double tol = 1e-12 * ab.norm() * (1.0 + (p - a).norm());
        inside = cross2(a, b, p) >= -tol;
      }
      if (inside) mask.at(i, j) = 1.0;
    }
  }
  return mask;
}

Tensor rasterize_box_mask(const Box3D& box, const CameraModel& cam) {
  const auto hull = projected_box_hull(box, cam);
  return fill_convex_polygon(hull, cam.width, cam.height);
}

bool point_in_polygon_even_odd(const Eigen::Vector2d& p, std::span<const Eigen::Vector2d> polygon) {
  bool inside = false;
  const std::size_t n = polygon.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const auto& a = polygon[i];
    const auto& b = polygon[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x_cross = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
      if (p.x() < x_cross) inside = !inside;
    }
  }
  return inside;
}

Tensor rasterize_road_mask(std::span<const GroundPolygon> polygons, const CameraModel& cam) {
  Tensor mask({cam.height, cam.width});
  if (polygons.empty()) return mask;
  const Eigen::Matrix3d rt = cam.rotation().transpose();
  const Eigen::Vector3d origin = cam.center_world();
  for (int i = 0; i < cam.height; ++i) {
    for (int j = 0; j < cam.width; ++j) {
      // Ray direction with unit camera depth, so the ray parameter is depth.
      const Eigen::Vector3d dir_cam((j + 0.5 - cam.cx()) / cam.fx(), (i + 0.5 - cam.cy()) / cam.fy(), 1.0);
      const Eigen::Vector3d dir = rt * dir_cam;
      if (dir.z() == 0.0) continue;
      const double depth = -origin.z() / dir.z();
      if (!(depth > cam.near_plane)) continue;
      const Eigen::Vector2d hit(origin.x() + depth * dir.x(), origin.y() + depth * dir.y());
      for (const auto& poly : polygons) {
        if (poly.size() >= 3 && point_in_polygon_even_odd(hit, poly)) {
          mask.at(i, j) = 1.0;
          break;
        }
      }
    }
  }
  return mask;
}

BoxCorners2D project_box_corners(const Box3D& box, const CameraModel& cam) {
  const auto corners = box_corners(box);
  const auto proj = project_points(corners, cam);
  BoxCorners2D out;
  for (std::size_t i = 0; i < 8; ++i) {
    out.pixels[i] = proj.pixels[i];
    out.valid[i] = proj.valid[i];
  }
  return out;
}

Tensor fourier_embed(std::span<const BoxCorners2D> corners, const CameraModel& cam) {
  const int m = static_cast<int>(corners.size());
  if (m == 0) throw ShapeError("fourier_embed: need at least one box slot");
  Tensor out({m, kFourierWidth});
  for (int b = 0; b < m; ++b) {
    const auto& bc = corners[static_cast<std::size_t>(b)];
    for (int c = 0; c < 8; ++c) {
      const bool ok = bc.valid[static_cast<std::size_t>(c)];
      const double coords[2] = {ok ? bc.pixels[static_cast<std::size_t>(c)].x() / cam.width : 0.0,
                                ok ? bc.pixels[static_cast<std::size_t>(c)].y() / cam.height : 0.0};
      for (int a = 0; a < 2; ++a) {
        const int scalar = c * 2 + a;
        for (int k = 0; k < kFourierBands; ++k) {
          const double arg = std::ldexp(std::numbers::pi, k) * coords[a];
          out.at(b, scalar * 2 * kFourierBands + 2 * k) = std::sin(arg);
          out.at(b, scalar * 2 * kFourierBands + 2 * k + 1) = std::cos(arg);
        }
      }
    }
  }
  return out;
}

Tensor downsample_mask(const Tensor& mask, int factor) {
  if (mask.rank() < 2) throw ShapeError("downsample_mask: need [.., H, W], got " + dims_to_string(mask.dims()));
  const int h = mask.dim(-2), w = mask.dim(-1);
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw ShapeError("downsample_mask: factor " + std::to_string(factor) + " does not divide " +
                     dims_to_string(mask.dims()));
  }
  if (factor == 1) return mask;
  const int oh = h / factor, ow = w / factor;
  const std::size_t planes = mask.size() / static_cast<std::size_t>(h * w);
  Dims dims = mask.dims();
  dims[dims.size() - 2] = oh;
  dims[dims.size() - 1] = ow;
  Tensor out(dims);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = mask.data() + p * static_cast<std::size_t>(h * w);
    double* dst = out.data() + p * static_cast<std::size_t>(oh * ow);
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int di = 0; di < factor; ++di)
          for (int dj = 0; dj < factor; ++dj) acc += src[(i * factor + di) * w + j * factor + dj];
        dst[i * ow + j] = acc * inv;
      }
    }
  }
  return out;
}

int PerLMaskSet::count_valid() const {
  return static_cast<int>(std::count(valid.begin(), valid.end(), true));
}

PerLMaskSet PerLMaskSet::downsampled(int factor) const {
  return PerLMaskSet{downsample_mask(road, factor), downsample_mask(boxes, factor), valid};
}

}  // namespace perldiff
