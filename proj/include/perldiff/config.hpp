#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <string>

#include "perldiff/diffusion.hpp"
#include "perldiff/scenegen.hpp"

namespace perldiff {

// Configuration error carrying "<source>:<line>: <message>".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, int line, const std::string& message);
  int line() const { return line_; }

 private:
  int line_;
};

struct RunConfig {
  ModelConfig model;
  SceneGenConfig scenes;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  SampleOptions sampling;
  double dropout = 0.10;
  double lr = 5e-5;
  int warmup_steps = 1000;
  int steps = 20000;
  int batch_scenes = 1;
  std::uint64_t seed = 0;
  int train_scenes = 2000;
  int eval_scenes = 50;
  int checkpoint_every = 5000;
  std::string output_dir = "run";

  void validate() const;
  NoiseSchedule schedule() const { return make_schedule(T, beta_start, beta_end); }
};

// Parses a JSON config. Missing keys keep their defaults; unknown keys, wrong
// types and invalid values are rejected with the offending line.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace perldiff
