#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "perldiff/scene.hpp"

namespace perldiff {

// Colors are RGB in [0, 1]. Images are [3, H, W] tensors in [-1, 1].
struct Palette {
  std::vector<std::string> categories;
  std::vector<Eigen::Vector3d> colors;  // one per category
  Eigen::Vector3d road{0.5, 0.5, 0.5};
  std::vector<std::string> backgrounds;  // description tokens with a background shade
  std::vector<Eigen::Vector3d> background_colors;

  // The eight corners of the RGB cube at levels 0.1 and 0.9.
  static Palette default_palette();

  int category_index(const std::string& category) const;  // -1 when absent
  Eigen::Vector3d background(std::span<const std::string> tokens) const;
  double min_category_distance() const;
  // Segmentation radius: a quarter of the minimum inter-category distance.
  double threshold() const { return 0.25 * min_category_distance(); }
  bool operator==(const Palette&) const = default;
};

struct RigCamera {
  std::string name;
  double yaw_deg = 0.0;
  double pitch_deg = 8.0;  // downward tilt
  double hfov_deg = 60.0;
  double height_m = 1.5;
};

struct SceneGenConfig {
  int width = 48;
  int height = 32;
  std::vector<RigCamera> rig = {{"front_left", 50.0}, {"front", 0.0}, {"front_right", -50.0}};
  int min_boxes = 1;
  int max_boxes = 6;
  double min_range = 4.0;
  double max_range = 18.0;
  double max_bearing_deg = 80.0;
  int placement_attempts = 60;

  std::vector<CameraModel> cameras() const;
  void validate() const;
};

// Nominal (length, width, height) of a category in meters.
Eigen::Vector3d category_size(const std::string& category);

SceneAnnotation generate_scene(std::uint64_t seed, const SceneGenConfig& cfg, const std::string& scene_id);
// Scenes "<prefix>_00000", "<prefix>_00001", ... each from its own stream.
std::vector<SceneAnnotation> generate_corpus(std::uint64_t seed, int count, const SceneGenConfig& cfg,
                                             const std::string& prefix);

// Pixels of the hull within one pixel of its edge nearest the projected
// front-face center; empty when the front face is behind the camera.
Tensor front_edge_mask(const Box3D& box, const CameraModel& cam);

Tensor render_ground_truth(const SceneAnnotation& scene, const CameraModel& cam, const Palette& palette);

// Per camera: index into scene.boxes of each box with a non-empty hull, and
// the part of its hull not covered by nearer boxes.
struct VisibleRegions {
  std::vector<int> box;
  std::vector<Tensor> region;  // [H, W] binary
  std::vector<double> depth;
};

VisibleRegions visible_regions(const SceneAnnotation& scene, const CameraModel& cam);

struct ControllabilityReport {
  double category_accuracy = 0.0;
  double mean_mask_iou = 0.0;
  double translation_response_rate = 0.0;
  double road_iou = 0.0;
  int boxes_scored = 0;
  int road_views = 0;
  int probes = 0;
};

// Raw counts for one scene; aggregate() turns a list of them into rates.
struct SceneScore {
  std::string scene_id;
  int boxes_scored = 0;
  int category_correct = 0;
  double iou_sum = 0.0;
  int road_views = 0;
  double road_iou_sum = 0.0;
  int probes = 0;
  int probes_responded = 0;
};

struct EvaluatorOptions {
  int min_visible_pixels = 6;
};

// Scores one scene's generated images (one per camera, in rig order).
SceneScore evaluate_controllability(const std::vector<Tensor>& images, const SceneAnnotation& scene,
                                    const Palette& palette, const EvaluatorOptions& options = {});

ControllabilityReport aggregate(std::span<const SceneScore> scores);

// Nearest-palette-color classification of a pixel (RGB in [0, 1]).
int nearest_category(const Eigen::Vector3d& rgb, const Palette& palette);

// Translation probe: the box with the largest visible region (among regions
// not spanning the full image width) is moved
// sideways in world space so that its center's projection shifts by
// `shift_px` towards the image center of `camera`.
struct TranslationProbe {
  int camera = -1;
  int box = -1;
  int direction = 0;  // +1: towards larger u
  SceneAnnotation shifted;
};

std::optional<TranslationProbe> make_translation_probe(const SceneAnnotation& scene, const Palette& palette,
                                                       double shift_px = 8.0,
                                                       const EvaluatorOptions& options = {});

// u-centroid of pixels segmented as the probed box's color inside the union
// of its visible regions before and after the shift; true when it moves in
// the probe direction.
bool translation_responded(const TranslationProbe& probe, const SceneAnnotation& scene, const Tensor& before,
                           const Tensor& after, const Palette& palette);

}  // namespace perldiff
