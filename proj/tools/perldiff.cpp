#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "perldiff/pipeline.hpp"

using namespace perldiff;
namespace fs = std::filesystem;

namespace {

std::string slot_name(const char* prefix, int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02d", prefix, k);
  return buf;
}

void dump_masks(const SceneAnnotation& scene, const std::string& dir, int max_boxes, const Vocabulary& vocab) {
  fs::create_directories(dir);
  for (const auto& cam : scene.cameras) {
    const CameraLayout layout = layout_camera(scene, cam, max_boxes, vocab);
    write_pgm(dir + "/" + cam.name + "_road.pgm", layout.masks.road);
    const std::size_t plane = static_cast<std::size_t>(cam.height) * static_cast<std::size_t>(cam.width);
    for (int k = 0; k < layout.masks.count_valid(); ++k) {
      Tensor m({cam.height, cam.width});
      std::copy_n(layout.masks.boxes.data() + static_cast<std::size_t>(k) * plane, plane, m.data());
      write_pgm(dir + "/" + cam.name + "_" + slot_name("box", k) + ".pgm", m);
    }
  }
}

struct Common {
  std::uint64_t seed = 0;
  double scale = 5.0;
  int steps = 0;
  double eta = 0.0;
  int workers = 1;
};

SampleOptions sample_options(const Common& c) {
  SampleOptions o;
  o.guidance_scale = c.scale;
  o.eta = c.eta;
  if (c.steps > 0) o.steps = c.steps;
  return o;
}

int cmd_train(const std::string& config, int steps, const std::string& out, std::int64_t seed, bool resume) {
  RunConfig cfg = load_run_config(config);
  if (steps >= 0) cfg.steps = steps;
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  const std::string dir = out.empty() ? cfg.output_dir : out;
  fs::create_directories(dir);
  {
    std::ofstream f(dir + "/config.json");
    f << run_config_to_json(cfg).dump(2) << '\n';
  }
  const auto t0 = std::chrono::steady_clock::now();
  double running = 0.0;
  train(cfg, dir, resume, [&](const TrainProgress& p) {
    running = p.step == 1 ? p.loss : 0.99 * running + 0.01 * p.loss;
    if (p.step == 1 || p.step % 100 == 0 || p.step == cfg.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %d  loss %.4f  avg %.4f  lr %.2e  %.0fs\n", p.step, p.loss, running, p.lr, secs);
    }
  });
  std::fprintf(stderr, "wrote %s/final.bin\n", dir.c_str());
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& scenes_path, const std::string& out,
                 const Common& c, bool dump_attn, bool masks) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  DenoiserModel model = model_from_checkpoint(ckpt);
  const auto scenes = load_scenes(scenes_path);
  const NoiseSchedule sched = checkpoint_schedule(ckpt);
  const SampleOptions opts = sample_options(c);
  parallel_for(static_cast<int>(scenes.size()), c.workers, [&](int i) {
    const auto& scene = scenes[static_cast<std::size_t>(i)];
    const std::string dir = out + "/" + scene.scene_id;
    fs::create_directories(dir);
    GenerateHooks hooks;
    if (dump_attn) {
      fs::create_directories(dir + "/attn");
      hooks.on_step = [&](int step, int, const std::vector<AttentionTrace>& traces) {
        for (std::size_t k = 0; k < traces.size(); ++k) {
          const std::string base = dir + "/attn/" + slot_name("step", step) + "_" + scene.cameras[k].name;
          write_pgm(base + "_road.pgm", traces[k].road);
          write_pgm(base + "_objects.pgm", traces[k].objects);
        }
      };
    }
    const auto images = generate_scene_images(model, scene, sched, opts, c.seed, dump_attn ? &hooks : nullptr);
    for (std::size_t k = 0; k < images.size(); ++k) write_ppm(dir + "/" + scene.cameras[k].name + ".ppm", images[k]);
    if (masks) dump_masks(scene, dir + "/masks", ckpt.model.max_boxes, ckpt.vocab);
  });
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& scenes_path, const std::string& config,
                 const std::string& out, const Common& c, bool oracle) {
  std::vector<SceneAnnotation> scenes;
  if (!scenes_path.empty()) {
    scenes = load_scenes(scenes_path);
  } else if (!config.empty()) {
    scenes = eval_corpus(load_run_config(config));
  } else {
    throw std::invalid_argument("evaluate needs --scenes or --config");
  }
  EvaluationResult result;
  if (oracle) {
    const Palette palette = ckpt_path.empty() ? Palette::default_palette() : load_checkpoint(ckpt_path).palette;
    result = evaluate_scenes(scenes, oracle_imager(palette), palette, c.workers);
  } else {
    if (ckpt_path.empty()) throw std::invalid_argument("evaluate needs --ckpt unless --oracle is given");
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    DenoiserModel model = model_from_checkpoint(ckpt);
    const NoiseSchedule sched = checkpoint_schedule(ckpt);
    result = evaluate_scenes(scenes, model_imager(model, sched, sample_options(c), c.seed), ckpt.palette, c.workers);
  }
  const std::string text = report_to_json(result).dump(2);
  if (out.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream f(out);
    if (!f) throw IoError("cannot write '" + out + "'");
    f << text << '\n';
  }
  return 0;
}

int cmd_project(const std::string& scenes_path, const std::string& out, int max_boxes) {
  const auto scenes = load_scenes(scenes_path);
  const Palette palette = Palette::default_palette();
  const Vocabulary vocab = Vocabulary::default_vocabulary();
  for (const auto& scene : scenes) {
    const std::string dir = out + "/" + scene.scene_id;
    dump_masks(scene, dir, max_boxes, vocab);
    for (const auto& cam : scene.cameras) write_ppm(dir + "/" + cam.name + "_render.ppm", render_ground_truth(scene, cam, palette));
  }
  return 0;
}

int cmd_corpus(const std::string& config, const std::string& split, const std::string& out) {
  const RunConfig cfg = load_run_config(config);
  if (split != "train" && split != "eval") throw std::invalid_argument("--split must be train or eval");
  save_scenes(out, split == "train" ? training_corpus(cfg) : eval_corpus(cfg));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"perldiff: perspective-layout diffusion at desk scale"};
  app.require_subcommand(1);

  std::string config, out, ckpt, scenes, split = "eval";
  int steps = -1, max_boxes = 16;
  std::int64_t seed_override = -1;
  bool resume = false, dump_attn = false, masks = false, oracle = false;
  Common common;

  auto* train_cmd = app.add_subcommand("train", "train a model from a config");
  train_cmd->add_option("--config", config, "run config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--steps", steps, "override the number of steps");
  train_cmd->add_option("--out", out, "output directory (default: output_dir from the config)");
  train_cmd->add_option("--seed", seed_override, "override the seed");
  train_cmd->add_flag("--resume", resume, "continue from <out>/state.bin if present");

  auto add_sampling = [&](CLI::App* cmd) {
    cmd->add_option("--seed", common.seed, "sampling seed");
    cmd->add_option("--scale", common.scale, "guidance scale");
    cmd->add_option("--ddim-steps", common.steps, "DDIM steps (default 50)");
    cmd->add_option("--eta", common.eta, "DDIM eta");
    cmd->add_option("--workers", common.workers, "scenes processed in parallel")->check(CLI::PositiveNumber);
  };

  auto* gen_cmd = app.add_subcommand("generate", "sample images for annotated scenes");
  gen_cmd->add_option("--ckpt", ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--scenes", scenes, "scenes JSON")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", out, "output directory")->required();
  gen_cmd->add_flag("--dump-attn", dump_attn, "write per-step attention maps");
  gen_cmd->add_flag("--dump-masks", masks, "write road and box masks");
  add_sampling(gen_cmd);

  auto* eval_cmd = app.add_subcommand("evaluate", "score controllability on held-out scenes");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint");
  eval_cmd->add_option("--scenes", scenes, "scenes JSON");
  eval_cmd->add_option("--config", config, "run config; its eval corpus is used when --scenes is absent");
  eval_cmd->add_option("--out", out, "report path (default: stdout)");
  eval_cmd->add_flag("--oracle", oracle, "score ground-truth renders instead of samples");
  add_sampling(eval_cmd);

  auto* proj_cmd = app.add_subcommand("project", "write masks and ground-truth renders");
  proj_cmd->add_option("--scenes", scenes, "scenes JSON")->required()->check(CLI::ExistingFile);
  proj_cmd->add_option("--out", out, "output directory")->required();
  proj_cmd->add_option("--max-boxes", max_boxes, "box slots per camera")->check(CLI::PositiveNumber);

  auto* corpus_cmd = app.add_subcommand("corpus", "write a generated scene split as JSON");
  corpus_cmd->add_option("--config", config, "run config")->required()->check(CLI::ExistingFile);
  corpus_cmd->add_option("--split", split, "train or eval");
  corpus_cmd->add_option("--out", out, "scenes JSON path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return cmd_train(config, steps, out, seed_override, resume);
    if (*gen_cmd) return cmd_generate(ckpt, scenes, out, common, dump_attn, masks);
    if (*eval_cmd) return cmd_evaluate(ckpt, scenes, config, out, common, oracle);
    if (*proj_cmd) return cmd_project(scenes, out, max_boxes);
    if (*corpus_cmd) return cmd_corpus(config, split, out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
