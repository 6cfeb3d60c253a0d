#include "perldiff/scenegen.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "perldiff/conditioning.hpp"
#include "perldiff/rng.hpp"

namespace perldiff {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Eigen::Vector3d pixel_rgb(const Tensor& img, int i, int j) {
  return {0.5 * (img.data()[static_cast<std::size_t>((0 * img.dim(1) + i) * img.dim(2) + j)] + 1.0),
          0.5 * (img.data()[static_cast<std::size_t>((1 * img.dim(1) + i) * img.dim(2) + j)] + 1.0),
          0.5 * (img.data()[static_cast<std::size_t>((2 * img.dim(1) + i) * img.dim(2) + j)] + 1.0)};
}

void check_image(const Tensor& img, const CameraModel& cam) {
  if (img.rank() != 3 || img.dim(0) != 3 || img.dim(1) != cam.height || img.dim(2) != cam.width) {
    throw ShapeError("image for camera '" + cam.name + "' has shape " + dims_to_string(img.dims()) + ", expected [3, " +
                     std::to_string(cam.height) + ", " + std::to_string(cam.width) + "]");
  }
}

double segment_distance(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (a + t * ab - p).norm();
}

}  // namespace

Palette Palette::default_palette() {
  Palette p;
  p.categories = category_tokens();
  for (int k = 0; k < 8; ++k) {
    p.colors.emplace_back((k & 4) ? 0.9 : 0.1, (k & 2) ? 0.9 : 0.1, (k & 1) ? 0.9 : 0.1);
  }
  p.backgrounds = scene_tokens();
  p.background_colors = {{0.55, 0.6, 0.9}, {0.25, 0.25, 0.45}, {0.6, 0.75, 0.6}};
  return p;
}

int Palette::category_index(const std::string& category) const {
  auto it = std::find(categories.begin(), categories.end(), category);
  return it == categories.end() ? -1 : static_cast<int>(it - categories.begin());
}

Eigen::Vector3d Palette::background(std::span<const std::string> tokens) const {
  for (const auto& t : tokens) {
    auto it = std::find(backgrounds.begin(), backgrounds.end(), t);
    if (it != backgrounds.end()) return background_colors[static_cast<std::size_t>(it - backgrounds.begin())];
  }
  return background_colors.empty() ? Eigen::Vector3d(0.5, 0.5, 0.5) : background_colors.front();
}

double Palette::min_category_distance() const {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < colors.size(); ++a) {
    for (std::size_t b = a + 1; b < colors.size(); ++b) best = std::min(best, (colors[a] - colors[b]).norm());
  }
  return best;
}

std::vector<CameraModel> SceneGenConfig::cameras() const {
  std::vector<CameraModel> cams;
  for (const auto& rc : rig) {
    cams.push_back(make_camera(rc.name, width, height, rc.hfov_deg * kDeg, Eigen::Vector3d(0.0, 0.0, rc.height_m),
                               rc.yaw_deg * kDeg, rc.pitch_deg * kDeg));
  }
  return cams;
}

void SceneGenConfig::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("scenegen: image size must be positive");
  if (rig.empty()) throw std::invalid_argument("scenegen: rig needs at least one camera");
  if (min_boxes < 0 || max_boxes < min_boxes) throw std::invalid_argument("scenegen: need 0 <= min_boxes <= max_boxes");
  if (!(min_range > 0.0 && max_range > min_range)) throw std::invalid_argument("scenegen: need 0 < min_range < max_range");
  if (placement_attempts < 1) throw std::invalid_argument("scenegen: placement_attempts must be positive");
  for (const auto& rc : rig) {
    if (!(rc.hfov_deg > 0.0 && rc.hfov_deg < 180.0)) throw std::invalid_argument("scenegen: hfov must be in (0, 180)");
    if (!(rc.height_m > 0.0)) throw std::invalid_argument("scenegen: camera height must be positive");
  }
}

Eigen::Vector3d category_size(const std::string& category) {
  static const std::vector<std::pair<std::string, Eigen::Vector3d>> sizes = {
      {"car", {4.5, 1.9, 1.6}},        {"truck", {7.0, 2.5, 3.0}},      {"bus", {11.0, 2.9, 3.4}},
      {"pedestrian", {0.7, 0.7, 1.75}}, {"bicycle", {1.8, 0.6, 1.3}},   {"motorcycle", {2.1, 0.8, 1.4}},
      {"barrier", {0.5, 2.5, 1.0}},     {"traffic_cone", {0.4, 0.4, 0.7}}};
  for (const auto& [name, size] : sizes) {
    if (name == category) return size;
  }
  throw std::invalid_argument("no nominal size for category '" + category + "'");
}

namespace {

struct Strip {
  Eigen::Vector2d origin, dir, normal;
  double half_width, s0, s1;

  GroundPolygon polygon() const {
    return {origin + s0 * dir - half_width * normal, origin + s1 * dir - half_width * normal,
            origin + s1 * dir + half_width * normal, origin + s0 * dir + half_width * normal};
  }
};

Strip make_strip(double heading, double offset, double half_width, double s0, double s1, Eigen::Vector2d origin) {
  Strip s;
  s.dir = Eigen::Vector2d(std::cos(heading), std::sin(heading));
  s.normal = Eigen::Vector2d(-s.dir.y(), s.dir.x());
  s.origin = origin + offset * s.normal;
  s.half_width = half_width;
  s.s0 = s0;
  s.s1 = s1;
  return s;
}

}  // namespace

SceneAnnotation generate_scene(std::uint64_t seed, const SceneGenConfig& cfg, const std::string& scene_id) {
  cfg.validate();
  CounterRng rng(seed, "scene");
  SceneAnnotation scene;
  scene.scene_id = scene_id;
  scene.cameras = cfg.cameras();
  scene.description_tokens = {scene_tokens()[static_cast<std::size_t>(rng.uniform_int(0, 2))]};

  std::vector<Strip> strips;
  const double heading = rng.uniform(-0.25, 0.25);
  strips.push_back(make_strip(heading, rng.uniform(-2.0, 2.0), 0.5 * rng.uniform(7.0, 12.0), -10.0, 60.0,
                              Eigen::Vector2d::Zero()));
  if (rng.uniform() < 0.4) {
    const Strip& main = strips.front();
    const Eigen::Vector2d at = main.origin + rng.uniform(8.0, 25.0) * main.dir;
    strips.push_back(make_strip(heading + std::numbers::pi / 2 + rng.uniform(-0.2, 0.2), 0.0,
                                0.5 * rng.uniform(6.0, 9.0), -40.0, 40.0, at));
  }
  for (const auto& s : strips) scene.road_polygons.push_back(s.polygon());

  const auto& cats = category_tokens();
  const int target = rng.uniform_int(cfg.min_boxes, cfg.max_boxes);
  std::vector<double> radii;
  for (int attempt = 0; attempt < cfg.placement_attempts && static_cast<int>(scene.boxes.size()) < target; ++attempt) {
    Box3D box;
    box.category = cats[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cats.size()) - 1))];
    box.size = category_size(box.category) * rng.uniform(0.9, 1.1);
    const Strip& s = strips[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(strips.size()) - 1))];
    const double along = rng.uniform(s.s0, s.s1);
    const double lateral = rng.uniform(-1.0, 1.0) * std::max(0.0, s.half_width - 0.5 * box.size.y());
    const Eigen::Vector2d xy = s.origin + along * s.dir + lateral * s.normal;
    box.center = Eigen::Vector3d(xy.x(), xy.y(), 0.5 * box.size.z());
    const double heading_s = std::atan2(s.dir.y(), s.dir.x());
    if (box.category == "pedestrian" || box.category == "traffic_cone") {
      box.yaw = normalize_yaw(rng.uniform(-std::numbers::pi, std::numbers::pi));
    } else {
      const double flip = rng.uniform() < 0.5 ? 0.0 : std::numbers::pi;
      box.yaw = normalize_yaw(heading_s + flip + 0.1 * rng.normal());
    }

    const double range = xy.norm();
    const double bearing = std::atan2(xy.y(), xy.x());
    if (range < cfg.min_range || range > cfg.max_range || std::abs(bearing) > cfg.max_bearing_deg * kDeg) continue;
    const double radius = 0.5 * std::hypot(box.size.x(), box.size.y()) + 0.3;
    bool overlaps = false;
    for (std::size_t k = 0; k < scene.boxes.size() && !overlaps; ++k) {
      overlaps = (scene.boxes[k].center.head<2>() - xy).norm() < radius + radii[k];
    }
    if (overlaps) continue;
    bool visible = false;
    for (const auto& cam : scene.cameras) {
      if (rasterize_box_mask(box, cam).max_abs() > 0.0) {
        visible = true;
        break;
      }
    }
    if (!visible) continue;
    scene.boxes.push_back(box);
    radii.push_back(radius);
  }
  return scene;
}

std::vector<SceneAnnotation> generate_corpus(std::uint64_t seed, int count, const SceneGenConfig& cfg,
                                             const std::string& prefix) {
  std::vector<SceneAnnotation> out;
  out.reserve(static_cast<std::size_t>(std::max(0, count)));
  const CounterRng root(seed, prefix);
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "_%05d", i);
    out.push_back(generate_scene(root.fork("scene", static_cast<std::uint64_t>(i)).next_u64(), cfg, prefix + id));
  }
  return out;
}

Tensor front_edge_mask(const Box3D& box, const CameraModel& cam) {
  Tensor mask({cam.height, cam.width});
  const auto hull = projected_box_hull(box, cam);
  if (hull.size() < 3) return mask;
  const Eigen::Vector3d front_world =
      box.center + Eigen::Vector3d(std::cos(box.yaw), std::sin(box.yaw), 0.0) * (0.5 * box.size.x());
  const Eigen::Vector3d pc = cam.to_camera(front_world);
  if (pc.z() <= cam.near_plane) return mask;
  const Eigen::Vector2d front(cam.fx() * pc.x() / pc.z() + cam.cx(), cam.fy() * pc.y() / pc.z() + cam.cy());
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < hull.size(); ++e) {
    const double d = segment_distance(front, hull[e], hull[(e + 1) % hull.size()]);
    if (d < best_d) {
      best_d = d;
      best = e;
    }
  }
  const Eigen::Vector2d a = hull[best], b = hull[(best + 1) % hull.size()];
  const Tensor inside = fill_convex_polygon(hull, cam.width, cam.height);
  for (int i = 0; i < cam.height; ++i) {
    for (int j = 0; j < cam.width; ++j) {
      if (inside.at(i, j) > 0.0 && segment_distance(Eigen::Vector2d(j + 0.5, i + 0.5), a, b) <= 1.0) mask.at(i, j) = 1.0;
    }
  }
  return mask;
}

VisibleRegions visible_regions(const SceneAnnotation& scene, const CameraModel& cam) {
  struct Item {
    double depth;
    int index;
    Tensor mask;
  };
  std::vector<Item> items;
  for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
    Tensor m = rasterize_box_mask(scene.boxes[b], cam);
    if (m.max_abs() == 0.0) continue;
    items.push_back({cam.to_camera(scene.boxes[b].center).z(), static_cast<int>(b), std::move(m)});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.depth < b.depth; });
  VisibleRegions out;
  Tensor covered({cam.height, cam.width});
  for (auto& it : items) {
    Tensor region = it.mask;
    for (std::size_t p = 0; p < region.size(); ++p) {
      if (covered[p] > 0.0) region[p] = 0.0;
      if (it.mask[p] > 0.0) covered[p] = 1.0;
    }
    out.box.push_back(it.index);
    out.region.push_back(std::move(region));
    out.depth.push_back(it.depth);
  }
  return out;
}

Tensor render_ground_truth(const SceneAnnotation& scene, const CameraModel& cam, const Palette& palette) {
  const int h = cam.height, w = cam.width;
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  std::vector<Eigen::Vector3d> rgb(plane, palette.background(scene.description_tokens));
  const Tensor road = rasterize_road_mask(scene.road_polygons, cam);
  for (std::size_t p = 0; p < plane; ++p) {
    if (road[p] > 0.0) rgb[p] = palette.road;
  }
  const VisibleRegions vis = visible_regions(scene, cam);
  // Painter's order, far to near.
  for (std::size_t k = vis.box.size(); k-- > 0;) {
    const Box3D& box = scene.boxes[static_cast<std::size_t>(vis.box[k])];
    const int ci = palette.category_index(box.category);
    if (ci < 0) throw std::invalid_argument("palette has no color for category '" + box.category + "'");
    const Eigen::Vector3d color = palette.colors[static_cast<std::size_t>(ci)];
    const Eigen::Vector3d bright = (1.4 * color).cwiseMin(1.0);
    const Tensor mask = rasterize_box_mask(box, cam);
    const Tensor edge = front_edge_mask(box, cam);
    for (std::size_t p = 0; p < plane; ++p) {
      if (mask[p] > 0.0) rgb[p] = edge[p] > 0.0 ? bright : color;
    }
  }
  Tensor img({3, h, w});
  for (int c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < plane; ++p) img[static_cast<std::size_t>(c) * plane + p] = 2.0 * rgb[p][c] - 1.0;
  }
  return img;
}

int nearest_category(const Eigen::Vector3d& rgb, const Palette& palette) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < palette.colors.size(); ++k) {
    const double d = (rgb - palette.colors[k]).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

SceneScore evaluate_controllability(const std::vector<Tensor>& images, const SceneAnnotation& scene,
                                    const Palette& palette, const EvaluatorOptions& options) {
  if (images.size() != scene.cameras.size()) {
    throw ShapeError("evaluate: " + std::to_string(images.size()) + " images for " +
                     std::to_string(scene.cameras.size()) + " cameras");
  }
  SceneScore score;
  score.scene_id = scene.scene_id;
  const double thr = palette.threshold();
  const std::size_t ncat = palette.colors.size();
  for (std::size_t c = 0; c < scene.cameras.size(); ++c) {
    const CameraModel& cam = scene.cameras[c];
    const Tensor& img = images[c];
    check_image(img, cam);
    const int h = cam.height, w = cam.width;
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    std::vector<int> nearest(plane);
    std::vector<std::vector<double>> dist(ncat, std::vector<double>(plane));
    std::vector<double> road_dist(plane);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const std::size_t p = static_cast<std::size_t>(i) * static_cast<std::size_t>(w) + static_cast<std::size_t>(j);
        const Eigen::Vector3d rgb = pixel_rgb(img, i, j);
        for (std::size_t k = 0; k < ncat; ++k) dist[k][p] = (rgb - palette.colors[k]).norm();
        road_dist[p] = (rgb - palette.road).norm();
        nearest[p] = nearest_category(rgb, palette);
      }
    }
    const VisibleRegions vis = visible_regions(scene, cam);
    std::vector<int> cat(vis.box.size());
    for (std::size_t k = 0; k < vis.box.size(); ++k) {
      const auto& name = scene.boxes[static_cast<std::size_t>(vis.box[k])].category;
      cat[k] = palette.category_index(name);
      if (cat[k] < 0) throw std::invalid_argument("palette has no color for category '" + name + "'");
    }
    for (std::size_t k = 0; k < vis.box.size(); ++k) {
      const Tensor& region = vis.region[k];
      std::vector<int> votes(ncat, 0);
      std::vector<double> dsum(ncat, 0.0);
      int count = 0;
      for (std::size_t p = 0; p < plane; ++p) {
        if (region[p] == 0.0) continue;
        ++count;
        ++votes[static_cast<std::size_t>(nearest[p])];
        for (std::size_t q = 0; q < ncat; ++q) dsum[q] += dist[q][p];
      }
      if (count < options.min_visible_pixels) continue;
      // Majority vote; ties go to the smaller summed distance.
      std::size_t pred = 0;
      for (std::size_t q = 1; q < ncat; ++q) {
        if (votes[q] > votes[pred] || (votes[q] == votes[pred] && dsum[q] < dsum[pred])) pred = q;
      }
      ++score.boxes_scored;
      const auto target = static_cast<std::size_t>(cat[k]);
      if (pred == target) ++score.category_correct;

      std::size_t inter = 0, uni = 0;
      for (std::size_t p = 0; p < plane; ++p) {
        bool other = false;
        for (std::size_t o = 0; o < vis.box.size() && !other; ++o) {
          other = o != k && cat[o] == cat[k] && vis.region[o][p] > 0.0;
        }
        const bool seg = dist[target][p] <= thr && !other;
        const bool in = region[p] > 0.0;
        inter += (seg && in) ? 1 : 0;
        uni += (seg || in) ? 1 : 0;
      }
      score.iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
    }

    const Tensor road = rasterize_road_mask(scene.road_polygons, cam);
    std::vector<bool> any_box(plane, false);
    for (const auto& r : vis.region) {
      for (std::size_t p = 0; p < plane; ++p) any_box[p] = any_box[p] || r[p] > 0.0;
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t p = 0; p < plane; ++p) {
      if (any_box[p]) continue;
      const bool seg = road_dist[p] <= thr;
      const bool in = road[p] > 0.0;
      inter += (seg && in) ? 1 : 0;
      uni += (seg || in) ? 1 : 0;
    }
    if (uni > 0) {
      ++score.road_views;
      score.road_iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
    }
  }
  return score;
}

ControllabilityReport aggregate(std::span<const SceneScore> scores) {
  ControllabilityReport r;
  int correct = 0, responded = 0;
  double iou = 0.0, road = 0.0;
  for (const auto& s : scores) {
    r.boxes_scored += s.boxes_scored;
    correct += s.category_correct;
    iou += s.iou_sum;
    r.road_views += s.road_views;
    road += s.road_iou_sum;
    r.probes += s.probes;
    responded += s.probes_responded;
  }
  if (r.boxes_scored > 0) {
    r.category_accuracy = static_cast<double>(correct) / r.boxes_scored;
    r.mean_mask_iou = iou / r.boxes_scored;
  }
  if (r.road_views > 0) r.road_iou = road / r.road_views;
  if (r.probes > 0) r.translation_response_rate = static_cast<double>(responded) / r.probes;
  return r;
}

std::optional<TranslationProbe> make_translation_probe(const SceneAnnotation& scene, const Palette& palette,
                                                       double shift_px, const EvaluatorOptions& options) {
  (void)palette;
  int best_cam = -1, best_box = -1, best_count = options.min_visible_pixels - 1;
  double best_u = 0.0;
  for (std::size_t c = 0; c < scene.cameras.size(); ++c) {
    const VisibleRegions vis = visible_regions(scene, scene.cameras[c]);
    for (std::size_t k = 0; k < vis.box.size(); ++k) {
      const Tensor& r = vis.region[k];
      int count = 0;
      double usum = 0.0;
      bool left = false, right = false;
      for (int i = 0; i < r.dim(0); ++i) {
        for (int j = 0; j < r.dim(1); ++j) {
          if (r.at(i, j) > 0.0) {
            ++count;
            usum += j + 0.5;
            left = left || j == 0;
            right = right || j == r.dim(1) - 1;
          }
        }
      }
      // A region spanning the full width cannot move sideways.
      if (left && right) continue;
      if (count > best_count) {
        best_count = count;
        best_cam = static_cast<int>(c);
        best_box = vis.box[k];
        best_u = usum / count;
      }
    }
  }
  if (best_box < 0) return std::nullopt;
  TranslationProbe probe;
  probe.camera = best_cam;
  probe.box = best_box;
  const CameraModel& cam = scene.cameras[static_cast<std::size_t>(best_cam)];
  probe.direction = best_u < 0.5 * cam.width ? 1 : -1;
  probe.shifted = scene;
  Box3D& box = probe.shifted.boxes[static_cast<std::size_t>(best_box)];
  const double depth = cam.to_camera(box.center).z();
  const Eigen::Vector3d delta_cam(probe.direction * shift_px * depth / cam.fx(), 0.0, 0.0);
  box.center += cam.rotation().transpose() * delta_cam;
  return probe;
}

bool translation_responded(const TranslationProbe& probe, const SceneAnnotation& scene, const Tensor& before,
                           const Tensor& after, const Palette& palette) {
  const CameraModel& cam = scene.cameras.at(static_cast<std::size_t>(probe.camera));
  check_image(before, cam);
  check_image(after, cam);
  const int h = cam.height, w = cam.width;
  const auto& category = scene.boxes.at(static_cast<std::size_t>(probe.box)).category;
  const int ci = palette.category_index(category);
  if (ci < 0) throw std::invalid_argument("palette has no color for category '" + category + "'");
  const Eigen::Vector3d color = palette.colors[static_cast<std::size_t>(ci)];

  // Union of the probed box's visible regions, dilated by one pixel, minus
  // the visible regions of other boxes of the same category.
  Tensor zone({h, w}), others({h, w});
  for (const SceneAnnotation* s : {&scene, &probe.shifted}) {
    const VisibleRegions vis = visible_regions(*s, cam);
    for (std::size_t k = 0; k < vis.box.size(); ++k) {
      const bool self = vis.box[k] == probe.box;
      if (!self && s->boxes[static_cast<std::size_t>(vis.box[k])].category != category) continue;
      const Tensor& r = vis.region[k];
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          if (r.at(i, j) == 0.0) continue;
          if (!self) {
            others.at(i, j) = 1.0;
            continue;
          }
          for (int di = -1; di <= 1; ++di) {
            for (int dj = -1; dj <= 1; ++dj) {
              const int ii = i + di, jj = j + dj;
              if (ii >= 0 && ii < h && jj >= 0 && jj < w) zone.at(ii, jj) = 1.0;
            }
          }
        }
      }
    }
  }
  const double thr = palette.threshold();
  auto centroid = [&](const Tensor& img, double& u) {
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (zone.at(i, j) == 0.0 || others.at(i, j) > 0.0) continue;
        if ((pixel_rgb(img, i, j) - color).norm() > thr) continue;
        sum += j + 0.5;
        ++n;
      }
    }
    if (n == 0) return false;
    u = sum / n;
    return true;
  };
  double u0 = 0.0, u1 = 0.0;
  if (!centroid(before, u0) || !centroid(after, u1)) return false;
  return (u1 - u0) * probe.direction > 0.0;
}

}  // namespace perldiff
