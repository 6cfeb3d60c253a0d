#include "perldiff/pipeline.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

namespace perldiff {

namespace fs = std::filesystem;

TrainingExample make_training_example(const SceneAnnotation& scene, const ModelConfig& cfg, const Vocabulary& vocab,
                                      const Palette& palette) {
  TrainingExample ex;
  ex.scene = scene;
  for (const auto& cam : scene.cameras) {
    if (cam.width != cfg.width || cam.height != cfg.height) {
      throw ShapeError("camera '" + cam.name + "' is " + std::to_string(cam.width) + "x" + std::to_string(cam.height) +
                       ", model expects " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
    }
    ex.layouts.push_back(layout_camera(scene, cam, cfg.max_boxes, vocab));
    ex.images.push_back(render_ground_truth(scene, cam, palette));
  }
  return ex;
}

Checkpoint make_checkpoint(const DenoiserModel& model, const Palette& palette, const NoiseSchedule& sched) {
  Checkpoint c;
  c.model = model.config();
  c.vocab = model.vocab();
  c.palette = palette;
  c.T = sched.steps;
  c.beta_start = sched.beta_start;
  c.beta_end = sched.beta_end;
  for (const auto& [name, entry] : model.params().entries()) c.params.add(name, entry.value);
  return c;
}

DenoiserModel model_from_checkpoint(const Checkpoint& ckpt) {
  return DenoiserModel(ckpt.model, ckpt.vocab, ckpt.params);
}

std::vector<SceneAnnotation> training_corpus(const RunConfig& cfg) {
  return generate_corpus(cfg.seed, cfg.train_scenes, cfg.scenes, "train");
}

std::vector<SceneAnnotation> eval_corpus(const RunConfig& cfg) {
  return generate_corpus(cfg.seed, cfg.eval_scenes, cfg.scenes, "eval");
}

namespace {

constexpr char kStateMagic[4] = {'P', 'S', 'T', 'A'};

void save_state(const std::string& path, const ParameterStore& params, int step) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out.write(kStateMagic, 4);
    const std::uint32_t s = static_cast<std::uint32_t>(step), n = static_cast<std::uint32_t>(params.size());
    out.write(reinterpret_cast<const char*>(&s), 4);
    out.write(reinterpret_cast<const char*>(&n), 4);
    for (const auto& [name, e] : params.entries()) {
      const std::uint64_t size = e.value.size();
      out.write(reinterpret_cast<const char*>(&size), 8);
      for (const Tensor* t : {&e.value, &e.first_moment, &e.second_moment}) {
        out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(size * sizeof(double)));
      }
    }
    if (!out) throw IoError("write to '" + tmp + "' failed");
  }
  fs::rename(tmp, path);
}

int load_state(const std::string& path, ParameterStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  char magic[4];
  std::uint32_t step = 0, n = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&step), 4);
  in.read(reinterpret_cast<char*>(&n), 4);
  if (!in || std::string(magic, 4) != std::string(kStateMagic, 4) || n != params.size()) {
    throw IoError("'" + path + "' does not match this model");
  }
  for (auto& [name, e] : params.entries()) {
    std::uint64_t size = 0;
    in.read(reinterpret_cast<char*>(&size), 8);
    if (size != e.value.size()) throw IoError("'" + path + "': size mismatch for '" + name + "'");
    for (Tensor* t : {&e.value, &e.first_moment, &e.second_moment}) {
      in.read(reinterpret_cast<char*>(t->data()), static_cast<std::streamsize>(size * sizeof(double)));
    }
  }
  if (!in) throw IoError("'" + path + "' is truncated");
  return static_cast<int>(step);
}

// Keeps metrics lines up to and including `step`.
void truncate_metrics(const std::string& path, int step) {
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && std::stoi(line) <= step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

std::string format_metrics(int step, double loss, double lr) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%d\t%.9g\t%.9g\n", step, loss, lr);
  return buf;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const std::string& out_dir, bool resume,
                  const std::function<void(const TrainProgress&)>& on_step) {
  cfg.validate();
  const Palette palette = Palette::default_palette();
  TrainResult result{DenoiserModel(cfg.model, Vocabulary::default_vocabulary(), cfg.seed), {}, 0};
  DenoiserModel& model = result.model;
  const NoiseSchedule sched = cfg.schedule();
  const auto corpus = training_corpus(cfg);

  std::ofstream metrics;
  int start = 0;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    const std::string state = out_dir + "/state.bin";
    if (resume && fs::exists(state)) {
      start = load_state(state, model.params());
      truncate_metrics(out_dir + "/metrics.tsv", start);
      metrics.open(out_dir + "/metrics.tsv", std::ios::app);
    } else {
      metrics.open(out_dir + "/metrics.tsv", std::ios::trunc);
    }
    if (!metrics) throw IoError("cannot write metrics log in '" + out_dir + "'");
  }
  result.resumed_from = start;

  const CounterRng root(cfg.seed, "train");
  const int n = static_cast<int>(corpus.size());
  for (int step = start + 1; step <= cfg.steps; ++step) {
    CounterRng rng = root.fork("step", static_cast<std::uint64_t>(step));
    std::vector<TrainingExample> batch;
    for (int b = 0; b < cfg.batch_scenes; ++b) {
      const auto& scene = corpus[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
      batch.push_back(make_training_example(scene, cfg.model, model.vocab(), palette));
    }
    const double loss = training_step(model, batch, sched, cfg.dropout, rng);
    const double lr = warmup_lr(cfg.lr, step, cfg.warmup_steps);
    adamw_step(model.params(), lr, step);
    result.losses.push_back(loss);
    if (metrics.is_open()) {
      metrics << format_metrics(step, loss, lr);
      metrics.flush();
    }
    if (on_step) on_step({step, loss, lr});
    if (!out_dir.empty() && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "/ckpt_%06d.bin", step);
      save_checkpoint(out_dir + name, make_checkpoint(model, palette, sched));
      save_state(out_dir + "/state.bin", model.params(), step);
    }
  }
  if (!out_dir.empty()) {
    save_checkpoint(out_dir + "/final.bin", make_checkpoint(model, palette, sched));
    save_state(out_dir + "/state.bin", model.params(), cfg.steps);
  }
  return result;
}

std::vector<Tensor> generate_scene_images(DenoiserModel& model, const SceneAnnotation& scene,
                                          const NoiseSchedule& sched, const SampleOptions& options,
                                          std::uint64_t seed, const GenerateHooks* hooks) {
  const ModelConfig& cfg = model.config();
  std::vector<ConditionBundle> cond, null;
  for (const auto& cam : scene.cameras) {
    if (cam.width != cfg.width || cam.height != cfg.height) {
      throw ShapeError("camera '" + cam.name + "' size differs from the model's " + std::to_string(cfg.width) + "x" +
                       std::to_string(cfg.height));
    }
    cond.push_back(assemble_condition_bundle(scene, cam, model.params(), model.vocab(), cfg.max_boxes));
    null.push_back(make_null_bundle(model.params(), cfg.max_boxes, cfg.height, cfg.width));
  }
  std::vector<AttentionTrace> traces;
  const bool tracing = hooks != nullptr && hooks->on_step;
  EpsPredictor base = model_predictor(model, std::move(cond), std::move(null), tracing ? &traces : nullptr);
  int cur_step = 0;
  EpsPredictor predict = base;
  if (tracing) {
    predict = [&](const std::vector<Tensor>& x, int t, bool conditional) {
      auto eps = base(x, t, conditional);
      if (conditional) hooks->on_step(cur_step, t, traces);
      return eps;
    };
  }
  CounterRng rng = CounterRng(seed, "generate").fork(scene.scene_id);
  return ddim_sample(predict, static_cast<int>(scene.cameras.size()), {3, cfg.height, cfg.width}, sched, options, rng,
                     [&](int i, int) { cur_step = i; });
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

EvaluationResult evaluate_scenes(const std::vector<SceneAnnotation>& scenes, const SceneImager& imager,
                                 const Palette& palette, int workers, const EvaluatorOptions& options) {
  EvaluationResult result;
  result.scenes.resize(scenes.size());
  parallel_for(static_cast<int>(scenes.size()), workers, [&](int i) {
    const SceneAnnotation& scene = scenes[static_cast<std::size_t>(i)];
    const auto images = imager(scene);
    SceneScore score = evaluate_controllability(images, scene, palette, options);
    if (auto probe = make_translation_probe(scene, palette, 8.0, options)) {
      const auto shifted = imager(probe->shifted);
      const auto c = static_cast<std::size_t>(probe->camera);
      score.probes = 1;
      score.probes_responded = translation_responded(*probe, scene, images[c], shifted[c], palette) ? 1 : 0;
    }
    result.scenes[static_cast<std::size_t>(i)] = std::move(score);
  });
  result.report = aggregate(result.scenes);
  return result;
}

SceneImager model_imager(DenoiserModel& model, const NoiseSchedule& sched, const SampleOptions& options,
                         std::uint64_t seed) {
  return [&model, &sched, options, seed](const SceneAnnotation& scene) {
    return generate_scene_images(model, scene, sched, options, seed);
  };
}

SceneImager oracle_imager(const Palette& palette) {
  return [palette](const SceneAnnotation& scene) {
    std::vector<Tensor> out;
    for (const auto& cam : scene.cameras) out.push_back(render_ground_truth(scene, cam, palette));
    return out;
  };
}

nlohmann::json report_to_json(const EvaluationResult& result) {
  using nlohmann::json;
  const auto& r = result.report;
  json scenes = json::array();
  for (const auto& s : result.scenes) {
    json j = {{"scene_id", s.scene_id}, {"boxes_scored", s.boxes_scored}};
    j["category_accuracy"] = s.boxes_scored > 0 ? json(static_cast<double>(s.category_correct) / s.boxes_scored) : json();
    j["mean_mask_iou"] = s.boxes_scored > 0 ? json(s.iou_sum / s.boxes_scored) : json();
    j["road_iou"] = s.road_views > 0 ? json(s.road_iou_sum / s.road_views) : json();
    j["translation_responded"] = s.probes > 0 ? json(s.probes_responded == 1) : json();
    scenes.push_back(std::move(j));
  }
  return {{"aggregate",
           {{"category_accuracy", r.category_accuracy},
            {"mean_mask_iou", r.mean_mask_iou},
            {"road_iou", r.road_iou},
            {"translation_response_rate", r.translation_response_rate},
            {"boxes_scored", r.boxes_scored},
            {"road_views", r.road_views},
            {"probes", r.probes}}},
          {"scenes", scenes}};
}

}  // namespace perldiff
