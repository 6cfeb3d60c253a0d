#include "perldiff/scene.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

namespace perldiff {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) { throw SchemaError(path + ": " + what); }

const json& field(const json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) fail(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) fail(path, std::string("missing field \"") + key + "\"");
  return *it;
}

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& path) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) fail(path + "." + it.key(), "unknown field");
  }
}

double number(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  return j.get<double>();
}

std::vector<double> numbers(const json& j, std::size_t n, const std::string& path) {
  if (!j.is_array() || j.size() != n) fail(path, "expected an array of " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(number(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

int positive_int(const json& j, const std::string& path) {
  if (!j.is_number_integer() || j.get<long long>() <= 0) fail(path, "expected a positive integer");
  return j.get<int>();
}

std::string string_value(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path, "expected a string");
  return j.get<std::string>();
}

CameraModel camera_from_json(const json& j, const std::string& path) {
  reject_unknown(j, {"name", "intrinsics", "extrinsics", "width", "height", "near_plane"}, path);
  CameraModel cam;
  cam.name = string_value(field(j, "name", path), path + ".name");
  const auto k = numbers(field(j, "intrinsics", path), 9, path + ".intrinsics");
  const auto e = numbers(field(j, "extrinsics", path), 16, path + ".extrinsics");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) cam.intrinsics(r, c) = k[static_cast<std::size_t>(r * 3 + c)];
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) cam.extrinsics(r, c) = e[static_cast<std::size_t>(r * 4 + c)];
  cam.width = positive_int(field(j, "width", path), path + ".width");
  cam.height = positive_int(field(j, "height", path), path + ".height");
  if (j.contains("near_plane")) cam.near_plane = number(j["near_plane"], path + ".near_plane");
  try {
    cam.validate();
  } catch (const GeometryError& err) {
    fail(path, err.what());
  }
  return cam;
}

json camera_to_json(const CameraModel& cam) {
  json k = json::array(), e = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) k.push_back(cam.intrinsics(r, c));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) e.push_back(cam.extrinsics(r, c));
  json out = {{"name", cam.name}, {"intrinsics", k}, {"extrinsics", e}, {"width", cam.width}, {"height", cam.height}};
  if (cam.near_plane != 0.05) out["near_plane"] = cam.near_plane;
  return out;
}

}  // namespace

void SceneAnnotation::validate(std::size_t max_boxes) const {
  if (cameras.empty()) throw SchemaError("scene '" + scene_id + "': at least one camera is required");
  if (description_tokens.empty()) throw SchemaError("scene '" + scene_id + "': description_tokens must be non-empty");
  if (boxes.size() > max_boxes) throw SchemaError("scene '" + scene_id + "': too many boxes");
  std::set<std::string> names;
  for (const auto& cam : cameras) {
    cam.validate();
    if (!names.insert(cam.name).second) throw SchemaError("scene '" + scene_id + "': duplicate camera '" + cam.name + "'");
  }
  for (const auto& b : boxes) b.validate();
}

const CameraModel& SceneAnnotation::camera(const std::string& name) const {
  for (const auto& cam : cameras) {
    if (cam.name == name) return cam;
  }
  throw std::out_of_range("scene '" + scene_id + "' has no camera '" + name + "'");
}

json scene_to_json(const SceneAnnotation& scene) {
  json cams = json::array();
  for (const auto& c : scene.cameras) cams.push_back(camera_to_json(c));
  json polys = json::array();
  for (const auto& poly : scene.road_polygons) {
    json p = json::array();
    for (const auto& v : poly) p.push_back({v.x(), v.y()});
    polys.push_back(p);
  }
  json boxes = json::array();
  for (const auto& b : scene.boxes) {
    boxes.push_back({{"center", {b.center.x(), b.center.y(), b.center.z()}},
                     {"size", {b.size.x(), b.size.y(), b.size.z()}},
                     {"yaw", b.yaw},
                     {"category", b.category}});
  }
  return {{"scene_id", scene.scene_id},
          {"description_tokens", scene.description_tokens},
          {"cameras", cams},
          {"road_polygons", polys},
          {"boxes", boxes}};
}

SceneAnnotation scene_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path, "expected a scene object");
  reject_unknown(j, {"scene_id", "description_tokens", "cameras", "road_polygons", "boxes"}, path);
  SceneAnnotation s;
  s.scene_id = string_value(field(j, "scene_id", path), path + ".scene_id");

  const json& toks = field(j, "description_tokens", path);
  if (!toks.is_array() || toks.empty()) fail(path + ".description_tokens", "expected a non-empty array of strings");
  for (std::size_t i = 0; i < toks.size(); ++i) {
    s.description_tokens.push_back(string_value(toks[i], path + ".description_tokens[" + std::to_string(i) + "]"));
  }

  const json& cams = field(j, "cameras", path);
  if (!cams.is_array() || cams.empty()) fail(path + ".cameras", "expected a non-empty array");
  for (std::size_t i = 0; i < cams.size(); ++i) {
    s.cameras.push_back(camera_from_json(cams[i], path + ".cameras[" + std::to_string(i) + "]"));
  }

  const json& polys = field(j, "road_polygons", path);
  if (!polys.is_array()) fail(path + ".road_polygons", "expected an array");
  for (std::size_t i = 0; i < polys.size(); ++i) {
    const std::string pp = path + ".road_polygons[" + std::to_string(i) + "]";
    if (!polys[i].is_array() || polys[i].size() < 3) fail(pp, "expected an array of at least 3 [x, y] vertices");
    GroundPolygon poly;
    for (std::size_t v = 0; v < polys[i].size(); ++v) {
      const auto xy = numbers(polys[i][v], 2, pp + "[" + std::to_string(v) + "]");
      poly.emplace_back(xy[0], xy[1]);
    }
    s.road_polygons.push_back(std::move(poly));
  }

  const json& boxes = field(j, "boxes", path);
  if (!boxes.is_array()) fail(path + ".boxes", "expected an array");
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const std::string bp = path + ".boxes[" + std::to_string(i) + "]";
    reject_unknown(boxes[i], {"center", "size", "yaw", "category"}, bp);
    Box3D b;
    const auto c = numbers(field(boxes[i], "center", bp), 3, bp + ".center");
    const auto sz = numbers(field(boxes[i], "size", bp), 3, bp + ".size");
    b.center = Eigen::Vector3d(c[0], c[1], c[2]);
    b.size = Eigen::Vector3d(sz[0], sz[1], sz[2]);
    if (!(b.size.minCoeff() > 0.0)) fail(bp + ".size", "components must be positive");
    b.yaw = normalize_yaw(number(field(boxes[i], "yaw", bp), bp + ".yaw"));
    b.category = string_value(field(boxes[i], "category", bp), bp + ".category");
    s.boxes.push_back(std::move(b));
  }
  try {
    s.validate();
  } catch (const std::exception& err) {
    fail(path, err.what());
  }
  return s;
}

std::vector<SceneAnnotation> scenes_from_json(const json& j) {
  std::vector<SceneAnnotation> out;
  if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(scene_from_json(j[i], "$[" + std::to_string(i) + "]"));
  } else {
    out.push_back(scene_from_json(j, "$"));
  }
  return out;
}

std::vector<SceneAnnotation> load_scenes(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open scenes file '" + file + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& err) {
    throw SchemaError("$: " + std::string(err.what()));
  }
  return scenes_from_json(j);
}

void save_scenes(const std::string& file, const std::vector<SceneAnnotation>& scenes) {
  json arr = json::array();
  for (const auto& s : scenes) arr.push_back(scene_to_json(s));
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write scenes file '" + file + "'");
  out << arr.dump(1) << '\n';
}

}  // namespace perldiff
