#pragma once

#include <cstdint>
#include <functional>
#include <nlohmann/json_fwd.hpp>
#include <optional>
#include <string>
#include <vector>

#include "perldiff/config.hpp"
#include "perldiff/diffusion.hpp"
#include "perldiff/io.hpp"
#include "perldiff/scenegen.hpp"

namespace perldiff {

TrainingExample make_training_example(const SceneAnnotation& scene, const ModelConfig& cfg, const Vocabulary& vocab,
                                      const Palette& palette);

Checkpoint make_checkpoint(const DenoiserModel& model, const Palette& palette, const NoiseSchedule& sched);
DenoiserModel model_from_checkpoint(const Checkpoint& ckpt);

struct TrainProgress {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  DenoiserModel model;
  std::vector<double> losses;  // per step of this invocation
  int resumed_from = 0;
};

// Trains from the config. Writes `metrics.tsv` (step, loss, lr), periodic
// `ckpt_<step>.bin`, `final.bin` and a resumable `state.bin` into `out_dir`
// when non-empty. With `resume`, continues from `state.bin` if present and
// produces the same result as an uninterrupted run.
TrainResult train(const RunConfig& cfg, const std::string& out_dir, bool resume = false,
                  const std::function<void(const TrainProgress&)>& on_step = nullptr);

// Held-out scenes: a different stream from the training corpus.
std::vector<SceneAnnotation> training_corpus(const RunConfig& cfg);
std::vector<SceneAnnotation> eval_corpus(const RunConfig& cfg);

struct GenerateHooks {
  // Called after each conditional pass with that pass's attention maps.
  std::function<void(int step_index, int t, const std::vector<AttentionTrace>& traces)> on_step;
};

// Samples every camera of `scene`. The initial noise depends only on
// (seed, scene_id), so moving a box keeps the noise fixed.
std::vector<Tensor> generate_scene_images(DenoiserModel& model, const SceneAnnotation& scene,
                                          const NoiseSchedule& sched, const SampleOptions& options,
                                          std::uint64_t seed, const GenerateHooks* hooks = nullptr);

struct EvaluationResult {
  std::vector<SceneScore> scenes;
  ControllabilityReport report;
};

using SceneImager = std::function<std::vector<Tensor>(const SceneAnnotation&)>;

// Scores every scene and runs the translation probe, parallel over scenes.
EvaluationResult evaluate_scenes(const std::vector<SceneAnnotation>& scenes, const SceneImager& imager,
                                 const Palette& palette, int workers = 1, const EvaluatorOptions& options = {});

SceneImager model_imager(DenoiserModel& model, const NoiseSchedule& sched, const SampleOptions& options,
                         std::uint64_t seed);
SceneImager oracle_imager(const Palette& palette);

nlohmann::json report_to_json(const EvaluationResult& result);

// Runs `fn(i)` for i in [0, n) on `workers` threads.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

}  // namespace perldiff
