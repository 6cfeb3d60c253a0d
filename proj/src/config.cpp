#include "perldiff/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

namespace perldiff {

using nlohmann::json;

ConfigError::ConfigError(const std::string& source, int line, const std::string& message)
    : std::runtime_error(source + ":" + std::to_string(line) + ": " + message), line_(line) {}

namespace {

int line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

// Line of the first occurrence of "key" at or after `from`.
int line_of_key(const std::string& text, const std::string& key, std::size_t from = 0) {
  const auto pos = text.find("\"" + key + "\"", from);
  return pos == std::string::npos ? 1 : line_of_offset(text, pos);
}

class Reader {
 public:
  Reader(const std::string& text, const std::string& source) : text_(text), source_(source) {}

  [[noreturn]] void fail(const std::string& key, const std::string& msg, std::size_t from = 0) const {
    throw ConfigError(source_, line_of_key(text_, key, from), msg);
  }

  double number(const json& v, const std::string& key, std::size_t from = 0) const {
    if (!v.is_number()) fail(key, "'" + key + "' must be a number", from);
    return v.get<double>();
  }
  int integer(const json& v, const std::string& key, std::size_t from = 0) const {
    if (!v.is_number_integer()) fail(key, "'" + key + "' must be an integer", from);
    return v.get<int>();
  }
  bool boolean(const json& v, const std::string& key) const {
    if (!v.is_boolean()) fail(key, "'" + key + "' must be true or false");
    return v.get<bool>();
  }
  std::string string(const json& v, const std::string& key, std::size_t from = 0) const {
    if (!v.is_string()) fail(key, "'" + key + "' must be a string", from);
    return v.get<std::string>();
  }
  std::vector<int> int_list(const json& v, const std::string& key) const {
    if (!v.is_array()) fail(key, "'" + key + "' must be an array of integers");
    std::vector<int> out;
    for (const auto& e : v) out.push_back(integer(e, key));
    return out;
  }

  const std::string& text() const { return text_; }

 private:
  const std::string& text_;
  const std::string& source_;
};

using Setter = std::function<void(RunConfig&, const json&, const Reader&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> s = {
      {"image_height", [](RunConfig& c, const json& v, const Reader& r) { c.model.height = c.scenes.height = r.integer(v, "image_height"); }},
      {"image_width", [](RunConfig& c, const json& v, const Reader& r) { c.model.width = c.scenes.width = r.integer(v, "image_width"); }},
      {"channels", [](RunConfig& c, const json& v, const Reader& r) { c.model.cond_dim = r.integer(v, "channels"); }},
      {"unet_channels", [](RunConfig& c, const json& v, const Reader& r) { c.model.channels = r.int_list(v, "unet_channels"); }},
      {"max_boxes", [](RunConfig& c, const json& v, const Reader& r) { c.model.max_boxes = r.integer(v, "max_boxes"); }},
      {"lambda_scene", [](RunConfig& c, const json& v, const Reader& r) { c.model.perlcm.lambda_scene = r.number(v, "lambda_scene"); }},
      {"lambda_object", [](RunConfig& c, const json& v, const Reader& r) { c.model.perlcm.lambda_object = r.number(v, "lambda_object"); }},
      {"cm_levels", [](RunConfig& c, const json& v, const Reader& r) { c.model.cm_levels = r.int_list(v, "cm_levels"); }},
      {"time_dim", [](RunConfig& c, const json& v, const Reader& r) { c.model.time_dim = r.integer(v, "time_dim"); }},
      {"groups", [](RunConfig& c, const json& v, const Reader& r) { c.model.groups = r.integer(v, "groups"); }},
      {"T", [](RunConfig& c, const json& v, const Reader& r) { c.T = r.integer(v, "T"); }},
      {"beta_start", [](RunConfig& c, const json& v, const Reader& r) { c.beta_start = r.number(v, "beta_start"); }},
      {"beta_end", [](RunConfig& c, const json& v, const Reader& r) { c.beta_end = r.number(v, "beta_end"); }},
      {"ddim_steps", [](RunConfig& c, const json& v, const Reader& r) { c.sampling.steps = r.integer(v, "ddim_steps"); }},
      {"guidance_scale", [](RunConfig& c, const json& v, const Reader& r) { c.sampling.guidance_scale = r.number(v, "guidance_scale"); }},
      {"eta", [](RunConfig& c, const json& v, const Reader& r) { c.sampling.eta = r.number(v, "eta"); }},
      {"clip_x0", [](RunConfig& c, const json& v, const Reader& r) { c.sampling.clip_x0 = r.boolean(v, "clip_x0"); }},
      {"dropout", [](RunConfig& c, const json& v, const Reader& r) { c.dropout = r.number(v, "dropout"); }},
      {"lr", [](RunConfig& c, const json& v, const Reader& r) { c.lr = r.number(v, "lr"); }},
      {"warmup_steps", [](RunConfig& c, const json& v, const Reader& r) { c.warmup_steps = r.integer(v, "warmup_steps"); }},
      {"steps", [](RunConfig& c, const json& v, const Reader& r) { c.steps = r.integer(v, "steps"); }},
      {"batch_scenes", [](RunConfig& c, const json& v, const Reader& r) { c.batch_scenes = r.integer(v, "batch_scenes"); }},
      {"seed", [](RunConfig& c, const json& v, const Reader& r) {
         if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
           r.fail("seed", "'seed' must be a non-negative integer");
         }
         c.seed = v.get<std::uint64_t>();
       }},
      {"train_scenes", [](RunConfig& c, const json& v, const Reader& r) { c.train_scenes = r.integer(v, "train_scenes"); }},
      {"eval_scenes", [](RunConfig& c, const json& v, const Reader& r) { c.eval_scenes = r.integer(v, "eval_scenes"); }},
      {"scene_min_boxes", [](RunConfig& c, const json& v, const Reader& r) { c.scenes.min_boxes = r.integer(v, "scene_min_boxes"); }},
      {"scene_max_boxes", [](RunConfig& c, const json& v, const Reader& r) { c.scenes.max_boxes = r.integer(v, "scene_max_boxes"); }},
      {"checkpoint_every", [](RunConfig& c, const json& v, const Reader& r) { c.checkpoint_every = r.integer(v, "checkpoint_every"); }},
      {"output_dir", [](RunConfig& c, const json& v, const Reader& r) { c.output_dir = r.string(v, "output_dir"); }},
      {"rig", [](RunConfig& c, const json& v, const Reader& r) {
         if (!v.is_array() || v.empty()) r.fail("rig", "'rig' must be a non-empty array of cameras");
         const std::size_t from = r.text().find("\"rig\"");
         c.scenes.rig.clear();
         for (const auto& cam : v) {
           if (!cam.is_object()) r.fail("rig", "'rig' entries must be objects");
           RigCamera rc;
           for (const auto& [k, val] : cam.items()) {
             if (k == "name") rc.name = r.string(val, k, from);
             else if (k == "yaw_deg") rc.yaw_deg = r.number(val, k, from);
             else if (k == "pitch_deg") rc.pitch_deg = r.number(val, k, from);
             else if (k == "hfov_deg") rc.hfov_deg = r.number(val, k, from);
             else if (k == "height_m") rc.height_m = r.number(val, k, from);
             else r.fail(k, "unknown rig key '" + k + "'", from);
           }
           if (rc.name.empty()) r.fail("rig", "every rig camera needs a 'name'");
           c.scenes.rig.push_back(rc);
         }
       }},
  };
  return s;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  scenes.validate();
  if (model.height != scenes.height || model.width != scenes.width) {
    throw std::invalid_argument("image size differs between model and scenes");
  }
  make_schedule(T, beta_start, beta_end);
  if (sampling.steps < 1 || sampling.steps > T) throw std::invalid_argument("ddim_steps must be in [1, T]");
  if (sampling.guidance_scale < 0.0) throw std::invalid_argument("guidance_scale must be >= 0");
  if (sampling.eta < 0.0 || sampling.eta > 1.0) throw std::invalid_argument("eta must be in [0, 1]");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be >= 0");
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch_scenes < 1) throw std::invalid_argument("batch_scenes must be positive");
  if (train_scenes < 1 || eval_scenes < 0) throw std::invalid_argument("corpus sizes must be positive");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source, line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0), "invalid JSON");
  }
  if (!j.is_object()) throw ConfigError(source, 1, "config must be a JSON object");
  Reader reader(text, source);
  RunConfig cfg;
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    auto it = table.find(key);
    if (it == table.end()) reader.fail(key, "unknown key '" + key + "'");
    it->second(cfg, value, reader);
  }
  // Report invalid values at the line of the key that most likely caused them.
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    std::string key;
    for (const auto& [k, _] : j.items()) {
      if (msg.find(k) != std::string::npos && k.size() > key.size()) key = k;
    }
    throw ConfigError(source, key.empty() ? 1 : line_of_key(text, key), msg);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

json run_config_to_json(const RunConfig& c) {
  json rig = json::array();
  for (const auto& rc : c.scenes.rig) {
    rig.push_back({{"name", rc.name}, {"yaw_deg", rc.yaw_deg}, {"pitch_deg", rc.pitch_deg}, {"hfov_deg", rc.hfov_deg},
                   {"height_m", rc.height_m}});
  }
  return {{"image_height", c.model.height},
          {"image_width", c.model.width},
          {"channels", c.model.cond_dim},
          {"unet_channels", c.model.channels},
          {"max_boxes", c.model.max_boxes},
          {"lambda_scene", c.model.perlcm.lambda_scene},
          {"lambda_object", c.model.perlcm.lambda_object},
          {"cm_levels", c.model.cm_levels},
          {"time_dim", c.model.time_dim},
          {"groups", c.model.groups},
          {"T", c.T},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},
          {"ddim_steps", c.sampling.steps},
          {"guidance_scale", c.sampling.guidance_scale},
          {"eta", c.sampling.eta},
          {"clip_x0", c.sampling.clip_x0},
          {"dropout", c.dropout},
          {"lr", c.lr},
          {"warmup_steps", c.warmup_steps},
          {"steps", c.steps},
          {"batch_scenes", c.batch_scenes},
          {"seed", c.seed},
          {"train_scenes", c.train_scenes},
          {"eval_scenes", c.eval_scenes},
          {"scene_min_boxes", c.scenes.min_boxes},
          {"scene_max_boxes", c.scenes.max_boxes},
          {"checkpoint_every", c.checkpoint_every},
          {"output_dir", c.output_dir},
          {"rig", rig}};
}

json model_config_to_json(const ModelConfig& m) {
  return {{"height", m.height},
          {"width", m.width},
          {"cond_dim", m.cond_dim},
          {"channels", m.channels},
          {"max_boxes", m.max_boxes},
          {"cm_levels", m.cm_levels},
          {"lambda_scene", m.perlcm.lambda_scene},
          {"lambda_object", m.perlcm.lambda_object},
          {"time_dim", m.time_dim},
          {"groups", m.groups}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.cond_dim = j.at("cond_dim").get<int>();
  m.channels = j.at("channels").get<std::vector<int>>();
  m.max_boxes = j.at("max_boxes").get<int>();
  m.cm_levels = j.at("cm_levels").get<std::vector<int>>();
  m.perlcm.lambda_scene = j.at("lambda_scene").get<double>();
  m.perlcm.lambda_object = j.at("lambda_object").get<double>();
  m.time_dim = j.at("time_dim").get<int>();
  m.groups = j.at("groups").get<int>();
  m.validate();
  return m;
}

}  // namespace perldiff
