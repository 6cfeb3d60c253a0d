#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "perldiff/geometry.hpp"

namespace perldiff {

// Raised for scene/config documents that violate their schema. The message
// starts with a JSON path such as "$[0].boxes[2].size".
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SceneAnnotation {
  std::string scene_id;
  std::vector<std::string> description_tokens;
  std::vector<CameraModel> cameras;
  std::vector<GroundPolygon> road_polygons;
  std::vector<Box3D> boxes;

  void validate(std::size_t max_boxes = 1024) const;
  const CameraModel& camera(const std::string& name) const;
};

nlohmann::json scene_to_json(const SceneAnnotation& scene);
SceneAnnotation scene_from_json(const nlohmann::json& j, const std::string& path = "$");

// A scenes document is either one scene object or an array of them.
std::vector<SceneAnnotation> scenes_from_json(const nlohmann::json& j);
std::vector<SceneAnnotation> load_scenes(const std::string& file);
void save_scenes(const std::string& file, const std::vector<SceneAnnotation>& scenes);

}  // namespace perldiff
