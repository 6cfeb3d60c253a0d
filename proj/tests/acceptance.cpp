#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "oracles.hpp"
#include "perldiff/pipeline.hpp"

using namespace perldiff;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor random_tensor(Dims dims, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(dims));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

Tensor binary_mask(CounterRng& rng, Dims dims) {
  Tensor m(std::move(dims));
  for (double& v : m.storage()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  return m;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

Outcome geometry_oracles() {
  CounterRng rng(101, "acceptance-geometry");
  long box_agree = 0, box_total = 0, unexplained = 0;
  const int cases = 250;
  for (int i = 0; i < cases; ++i) {
    const CameraModel cam = oracle::random_camera(rng);
    const Box3D box = oracle::random_box_near(cam, rng);
    const auto cmp = oracle::compare_box_mask(rasterize_box_mask(box, cam), box, cam);
    box_agree += cmp.agree;
    box_total += cmp.agree + cmp.disagree;
    unexplained += cmp.unexplained;
  }
  long road_agree = 0, road_total = 0;
  for (int i = 0; i < cases; ++i) {
    const CameraModel cam = oracle::random_camera(rng);
    std::vector<GroundPolygon> polys;
    const int n = rng.uniform_int(1, 3);
    for (int k = 0; k < n; ++k) polys.push_back(oracle::random_ground_polygon(rng, cam.center_world().head<2>()));
    const Tensor got = rasterize_road_mask(polys, cam), want = oracle::road_mask_oracle(polys, cam);
    for (std::size_t p = 0; p < got.size(); ++p) road_agree += got[p] == want[p];
    road_total += static_cast<long>(got.size());
  }
  const double box_rate = static_cast<double>(box_agree) / static_cast<double>(box_total);
  const double road_rate = static_cast<double>(road_agree) / static_cast<double>(road_total);
  return {box_rate >= 0.999 && road_rate >= 0.999 && unexplained == 0,
          std::to_string(cases) + " box cases agree " + fmt(box_rate, 6) + " (non-boundary misses " +
              std::to_string(unexplained) + "), " + std::to_string(cases) + " road cases agree " + fmt(road_rate, 6)};
}

Outcome attention_invariants() {
  constexpr int ch = 8, cond = 6, h = 3, w = 4, hw = h * w, m = 4;
  ParameterStore store;
  CounterRng init(1, "init");
  init_perlcm_params(store, "cm", ch, cond, init);
  CounterRng rng(202, "acceptance-attention");
  std::vector<std::string> failures;

  // Block identity on freshly initialized parameters.
  {
    Graph g(false);
    std::vector<Var> tokens;
    std::vector<BundleVars> bundles;
    std::vector<PerLMaskSet> masks;
    std::vector<Tensor> z;
    for (int c = 0; c < 3; ++c) {
      z.push_back(random_tensor({hw, ch}, rng));
      tokens.push_back(g.constant(z.back()));
      BundleVars b;
      b.h_m = g.constant(random_tensor({1, cond}, rng));
      b.h_d = g.constant(random_tensor({1, cond}, rng));
      b.h_b = g.constant(random_tensor({m, cond}, rng));
      b.null_scene = g.constant(random_tensor({1, cond}, rng));
      b.null_object = g.constant(random_tensor({1, cond}, rng));
      bundles.push_back(b);
      masks.push_back(PerLMaskSet{binary_mask(rng, {h, w}), binary_mask(rng, {m, h, w}), {true, true, c != 1, false}});
    }
    const auto out = perlcm_block(g, store, "cm", tokens, bundles, masks, {}, h, w);
    for (int c = 0; c < 3; ++c) {
      if (out[static_cast<std::size_t>(c)].value() != z[static_cast<std::size_t>(c)]) failures.push_back("block identity");
    }
  }

  store.value("cm.scene.gamma")[0] = 0.7;
  store.value("cm.object.gamma")[0] = -0.4;
  double worst_row = 0.0, worst_perm = 0.0;
  bool monotone = true, lambda0_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor z = random_tensor({hw, ch}, rng), hb = random_tensor({m, cond}, rng);
    const Tensor hm = random_tensor({1, cond}, rng), nul = random_tensor({1, cond}, rng);
    const Tensor road = binary_mask(rng, {hw});
    const Tensor boxes = binary_mask(rng, {m, h, w});
    const std::vector<bool> valid = {true, true, true, false};
    Graph g(false);
    const Var zv = g.constant(z);

    for (double lambda : {0.0, 1.0, 5.0, 20.0}) {
      const auto s = scene_cross_attention(g, store, "cm", zv, g.constant(hm), g.constant(nul), road, lambda);
      const auto o = object_cross_attention(g, store, "cm", zv, g.constant(hb), g.constant(nul), boxes, valid, lambda);
      for (const Tensor* a : {&s.weights.value(), &o.weights.value()}) {
        for (int i = 0; i < a->dim(0); ++i) {
          double sum = 0.0;
          for (int j = 0; j < a->dim(1); ++j) sum += a->at(i, j);
          worst_row = std::max(worst_row, std::abs(sum - 1.0));
        }
      }
    }

    // Unbiased attention assembled from primitive ops.
    auto p = [&](const std::string& n) { return g.parameter(store, n); };
    auto standard = [&](const std::string& kind, Var keys) {
      Var q = ops::matmul(zv, p("cm." + kind + ".q"));
      Var k = ops::matmul(keys, p("cm." + kind + ".k"));
      Var v = ops::matmul(keys, p("cm." + kind + ".v"));
      Var a = ops::softmax_lastdim(ops::scale(ops::matmul_nt(q, k), 1.0 / std::sqrt(double(ch))));
      Var out = ops::matmul(ops::matmul(a, v), p("cm." + kind + ".o"));
      return g.value(ops::add(ops::scale_by(out, p("cm." + kind + ".gamma")), zv));
    };
    const std::vector<bool> all_valid(m, true);
    const auto s0 = scene_cross_attention(g, store, "cm", zv, g.constant(hm), g.constant(nul), road, 0.0);
    const auto o0 = object_cross_attention(g, store, "cm", zv, g.constant(hb), g.constant(nul), boxes, all_valid, 0.0);
    lambda0_exact = lambda0_exact && s0.z.value() == standard("scene", ops::concat0(g.constant(hm), g.constant(nul)));
    lambda0_exact = lambda0_exact && o0.z.value() == standard("object", ops::concat0(g.constant(hb), g.constant(nul)));

    // In-mask weight must not drop as lambda grows.
    std::vector<double> prev_s(hw, -1.0), prev_o(hw, -1.0);
    for (double lambda : {0.0, 0.5, 1.0, 2.0, 5.0, 10.0}) {
      const auto s = scene_cross_attention(g, store, "cm", zv, g.constant(hm), g.constant(nul), road, lambda);
      const auto o = object_cross_attention(g, store, "cm", zv, g.constant(hb), g.constant(nul), boxes, valid, lambda);
      for (int i = 0; i < hw; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        if (road[ui] > 0.0) {
          monotone = monotone && s.weights.value().at(i, 0) >= prev_s[ui];
          prev_s[ui] = s.weights.value().at(i, 0);
        }
        if (boxes[ui] > 0.0) {
          monotone = monotone && o.weights.value().at(i, 0) >= prev_o[ui];
          prev_o[ui] = o.weights.value().at(i, 0);
        }
      }
    }

    // Permute the valid slots.
    const std::vector<int> perm = {2, 0, 1, 3};
    Tensor hb2 = hb, boxes2 = boxes;
    for (int i = 0; i < m; ++i) {
      const int src = perm[static_cast<std::size_t>(i)];
      for (int c = 0; c < cond; ++c) hb2.at(i, c) = hb.at(src, c);
      for (int q = 0; q < hw; ++q) boxes2[static_cast<std::size_t>(i * hw + q)] = boxes[static_cast<std::size_t>(src * hw + q)];
    }
    const auto a = object_cross_attention(g, store, "cm", zv, g.constant(hb), g.constant(nul), boxes, valid, 5.0);
    const auto b = object_cross_attention(g, store, "cm", zv, g.constant(hb2), g.constant(nul), boxes2, valid, 5.0);
    worst_perm = std::max(worst_perm, max_abs_diff(a.z.value(), b.z.value()));
  }
  if (worst_row > 1e-9) failures.push_back("row sums");
  if (!lambda0_exact) failures.push_back("lambda=0 equality");
  if (!monotone) failures.push_back("monotonicity");
  if (worst_perm > 1e-9) failures.push_back("permutation");
  std::string detail = "row err " + fmt(worst_row, 3) + ", perm err " + fmt(worst_perm, 3);
  for (const auto& f : failures) detail += "; failed " + f;
  return {failures.empty(), detail};
}

ModelConfig micro_model() {
  ModelConfig m;
  m.height = 16;
  m.width = 24;
  m.cond_dim = 16;
  m.channels = {8, 16, 16};
  m.max_boxes = 4;
  m.time_dim = 16;
  m.groups = 4;
  return m;
}

Outcome gradient_fidelity(std::size_t per_param) {
  const ModelConfig cfg = micro_model();
  DenoiserModel model(cfg, Vocabulary::default_vocabulary(), 303);
  // Zero-initialized gates and projections would make most gradients vanish.
  CounterRng wake(304, "wake");
  for (auto& [name, e] : model.params().entries()) {
    if (e.value.max_abs() == 0.0) e.value = random_tensor(e.value.dims(), wake, -0.2, 0.2);
  }
  SceneGenConfig sg;
  sg.width = cfg.width;
  sg.height = cfg.height;
  sg.max_boxes = 3;
  std::vector<TrainingExample> batch;
  for (const auto& scene : generate_corpus(305, 2, sg, "micro")) {
    batch.push_back(make_training_example(scene, cfg, model.vocab(), Palette::default_palette()));
  }
  const NoiseSchedule sched = make_schedule(1000, 1e-4, 2e-2);
  CounterRng rng(306, "frozen");
  std::vector<NoiseDraw> noise;
  for (const auto& ex : batch) noise.push_back(draw_noise(ex, sched, 0.0, rng));
  noise[1].dropped = true;
  const auto loss = [&](Graph& g, ParameterStore&) { return diffusion_loss(g, model, batch, noise, sched); };
  const GradCheckResult r = gradient_check(loss, model.params(), 1e-3, per_param);
  return {r.max_rel_error < 1e-3,
          "max rel err " + fmt(r.max_rel_error, 3) + " over " + std::to_string(r.checked) + " entries (worst " +
              r.worst_param + "[" + std::to_string(r.worst_index) + "])"};
}

Outcome diffusion_identities() {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 2e-2);
  std::vector<std::string> failures;

  CounterRng mc(401, "mc");
  const Tensor x0({4}, std::vector<double>{-0.9, -0.2, 0.4, 1.0});
  const int draws = 20000;
  for (int t : {1, 250, 600, 1000}) {
    const double ab = s.alpha_bar_at(t), var = 1.0 - ab;
    std::vector<double> sum(4), sq(4);
    for (int d = 0; d < draws; ++d) {
      Tensor eps({4});
      for (double& v : eps.storage()) v = mc.normal();
      const Tensor x = q_sample(x0, t, eps, s);
      for (std::size_t i = 0; i < 4; ++i) {
        sum[i] += x[i];
        sq[i] += x[i] * x[i];
      }
    }
    for (std::size_t i = 0; i < 4; ++i) {
      const double mu = std::sqrt(ab) * x0[i];
      if (std::abs(sum[i] / draws - mu) > 3.0 * std::sqrt(var / draws)) failures.push_back("mean t=" + std::to_string(t));
      if (std::abs(sq[i] / draws - (mu * mu + var)) > 3.0 * std::sqrt((2 * var * var + 4 * mu * mu * var) / draws)) {
        failures.push_back("second moment t=" + std::to_string(t));
      }
    }
  }

  const auto smooth = [](const std::vector<Tensor>& x, int t, bool cond) {
    std::vector<Tensor> e;
    for (const auto& xi : x) {
      Tensor o(xi.dims());
      for (std::size_t k = 0; k < o.size(); ++k) o[k] = std::tanh(xi[k] * (cond ? 1.1 : 0.6) + 1e-3 * t);
      e.push_back(std::move(o));
    }
    return e;
  };
  SampleOptions o;
  o.steps = 25;
  o.eta = 0.0;
  CounterRng r1(402, "ddim"), r2(402, "ddim");
  if (ddim_sample(smooth, 3, {3, 8, 12}, s, o, r1) != ddim_sample(smooth, 3, {3, 8, 12}, s, o, r2)) {
    failures.push_back("DDIM determinism");
  }

  CounterRng cr(403, "cfg");
  const std::vector<Tensor> xs = {random_tensor({3, 8, 12}, cr)};
  double affine_err = 0.0;
  const auto e0 = cfg_predict(smooth, xs, 500, 0.0), e1 = cfg_predict(smooth, xs, 500, 1.0);
  for (double scale : {0.5, 2.0, 5.0, 7.5}) {
    const auto es = cfg_predict(smooth, xs, 500, scale);
    for (std::size_t k = 0; k < es[0].size(); ++k) {
      affine_err = std::max(affine_err, std::abs(es[0][k] - ((1.0 - scale) * e0[0][k] + scale * e1[0][k])));
    }
  }
  if (affine_err > 1e-9) failures.push_back("CFG affinity");

  CounterRng dx(404, "x0");
  const std::vector<Tensor> target = {random_tensor({3, 8, 12}, dx), random_tensor({3, 8, 12}, dx)};
  const EpsPredictor oracle = [&](const std::vector<Tensor>& x_t, int t, bool) {
    const double ab = s.alpha_bar_at(t);
    std::vector<Tensor> eps;
    for (std::size_t c = 0; c < x_t.size(); ++c) {
      Tensor e(x_t[c].dims());
      for (std::size_t k = 0; k < e.size(); ++k) e[k] = (x_t[c][k] - std::sqrt(ab) * target[c][k]) / std::sqrt(1.0 - ab);
      eps.push_back(std::move(e));
    }
    return eps;
  };
  double inversion_err = 0.0;
  SampleOptions one;
  one.steps = 1;
  one.clip_x0 = false;
  CounterRng ir(405, "inv");
  const auto out = ddim_sample(oracle, 2, {3, 8, 12}, s, one, ir);
  for (std::size_t c = 0; c < 2; ++c) inversion_err = std::max(inversion_err, max_abs_diff(out[c], target[c]));
  if (inversion_err > 1e-9) failures.push_back("single-step inversion");

  std::string detail = "cfg err " + fmt(affine_err, 3) + ", inversion err " + fmt(inversion_err, 3);
  for (const auto& f : failures) detail += "; failed " + f;
  return {failures.empty(), detail};
}

Outcome checkpoint_round_trip(const fs::path& dir) {
  fs::create_directories(dir);
  ModelConfig cfg = micro_model();
  DenoiserModel model(cfg, Vocabulary::default_vocabulary(), 801);
  CounterRng wake(802, "wake");
  for (auto& [name, e] : model.params().entries()) {
    if (e.value.max_abs() == 0.0) e.value = random_tensor(e.value.dims(), wake, -0.2, 0.2);
  }
  const NoiseSchedule sched = make_schedule(1000, 1e-4, 2e-2);
  const Palette palette = Palette::default_palette();
  const std::string a = (dir / "a.bin").string(), b = (dir / "b.bin").string();
  // Storage is f32, so the reference model is the one already loaded once.
  save_checkpoint(a, make_checkpoint(model, palette, sched));
  DenoiserModel m1 = model_from_checkpoint(load_checkpoint(a));
  save_checkpoint(b, make_checkpoint(m1, palette, sched));
  DenoiserModel m2 = model_from_checkpoint(load_checkpoint(b));

  SceneGenConfig sg;
  sg.width = cfg.width;
  sg.height = cfg.height;
  const SceneAnnotation scene = generate_scene(803, sg, "roundtrip");
  SampleOptions o;
  o.steps = 10;
  const auto x1 = generate_scene_images(m1, scene, checkpoint_schedule(load_checkpoint(a)), o, 42);
  const auto x2 = generate_scene_images(m2, scene, checkpoint_schedule(load_checkpoint(b)), o, 42);
  const bool files_equal = read_file_bytes(a) == read_file_bytes(b);
  return {x1 == x2 && files_equal,
          std::string(x1 == x2 ? "generations bit-identical" : "generations differ") +
              (files_equal ? ", re-saved file identical" : ", re-saved file differs")};
}

struct LambdaRun {
  double lambda = 0.0;
  ControllabilityReport report;
};

RunConfig lambda_config(double lambda) {
  RunConfig cfg = parse_run_config("{}");
  cfg.model.perlcm.lambda_scene = lambda;
  cfg.model.perlcm.lambda_object = lambda;
  return cfg;
}

std::string lambda_tag(double lambda) {
  std::ostringstream s;
  s << "lambda" << lambda;
  return s.str();
}

// Trains (or resumes) and evaluates one model; both steps are cached on disk.
LambdaRun run_lambda(double lambda, const fs::path& root, int workers) {
  const RunConfig cfg = lambda_config(lambda);
  const fs::path dir = root / lambda_tag(lambda);
  const fs::path final_ckpt = dir / "final.bin", report_path = dir / "report.json";
  const bool done = fs::exists(final_ckpt) && fs::exists(dir / "config.json") &&
                    parse_run_config(read_text(dir / "config.json")).steps == cfg.steps;
  if (!done) {
    std::cerr << "training " << dir.string() << "\n";
    train(cfg, dir.string(), true, [&](const TrainProgress& p) {
      if (p.step % 1000 == 0) std::cerr << "  step " << p.step << " loss " << p.loss << "\n";
    });
    fs::remove(report_path);
  }
  LambdaRun run;
  run.lambda = lambda;
  if (fs::exists(report_path) && fs::last_write_time(report_path) >= fs::last_write_time(final_ckpt)) {
    const auto j = nlohmann::json::parse(read_text(report_path)).at("aggregate");
    run.report.category_accuracy = j.at("category_accuracy").get<double>();
    run.report.mean_mask_iou = j.at("mean_mask_iou").get<double>();
    run.report.road_iou = j.at("road_iou").get<double>();
    run.report.translation_response_rate = j.at("translation_response_rate").get<double>();
    return run;
  }
  std::cerr << "evaluating " << dir.string() << "\n";
  const Checkpoint ck = load_checkpoint(final_ckpt.string());
  DenoiserModel model = model_from_checkpoint(ck);
  const auto result = evaluate_scenes(eval_corpus(cfg), model_imager(model, checkpoint_schedule(ck), cfg.sampling, cfg.seed),
                                      ck.palette, workers);
  std::ofstream(report_path) << report_to_json(result).dump(2) << "\n";
  run.report = result.report;
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> criteria = {1, 2, 3, 4, 8};
  std::string artifacts = "acceptance";
  int workers = 1;
  std::size_t per_param = 24;
  app.add_option("--criteria", criteria, "criteria to run (1-8)")->delimiter(',');
  app.add_option("--artifacts", artifacts, "directory for trained models and reports");
  app.add_option("--workers", workers, "evaluation threads")->check(CLI::PositiveNumber);
  app.add_option("--grad-entries", per_param, "entries checked per parameter tensor (0 = all)");
  CLI11_PARSE(app, argc, argv);

  const std::map<int, double> budget = {{1, 30.0}, {2, 10.0}, {3, 300.0}, {4, 60.0}, {8, 60.0}};
  bool all_pass = true;
  auto report = [&](int id, const Outcome& o, double secs) {
    bool pass = o.pass;
    std::string detail = o.detail;
    if (budget.contains(id)) {
      detail += ", " + fmt(secs, 3) + " s of " + fmt(budget.at(id), 3) + " s";
      if (secs > budget.at(id)) pass = false;
    }
    all_pass = all_pass && pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
  };

  std::map<double, LambdaRun> runs;
  auto lambda_run = [&](double lambda) -> const LambdaRun& {
    if (!runs.contains(lambda)) runs[lambda] = run_lambda(lambda, artifacts, workers);
    return runs.at(lambda);
  };

  for (int id : criteria) {
    const auto t0 = Clock::now();
    try {
      switch (id) {
        case 1: {
          const Outcome o = geometry_oracles();
          report(1, o, seconds_since(t0));
          break;
        }
        case 2: {
          const Outcome o = attention_invariants();
          report(2, o, seconds_since(t0));
          break;
        }
        case 3: {
          const Outcome o = gradient_fidelity(per_param);
          report(3, o, seconds_since(t0));
          break;
        }
        case 4: {
          const Outcome o = diffusion_identities();
          report(4, o, seconds_since(t0));
          break;
        }
        case 5: {
          const auto& r = lambda_run(5.0).report;
          const bool ok = r.category_accuracy >= 0.80 && r.mean_mask_iou >= 0.40 && r.road_iou >= 0.60 &&
                          r.translation_response_rate >= 0.80;
          report(5, {ok, "accuracy " + fmt(r.category_accuracy) + ", mask IoU " + fmt(r.mean_mask_iou) + ", road IoU " +
                             fmt(r.road_iou) + ", translation " + fmt(r.translation_response_rate)},
                 seconds_since(t0));
          break;
        }
        case 6: {
          const double a = lambda_run(5.0).report.mean_mask_iou, b = lambda_run(0.0).report.mean_mask_iou;
          report(6, {a - b >= 0.05, "mask IoU lambda=5 " + fmt(a) + " vs lambda=0 " + fmt(b)}, seconds_since(t0));
          break;
        }
        case 7: {
          const double a = lambda_run(5.0).report.mean_mask_iou, b = lambda_run(1.0).report.mean_mask_iou;
          report(7, {a >= b, "mask IoU lambda=5 " + fmt(a) + " vs lambda=1 " + fmt(b)}, seconds_since(t0));
          break;
        }
        case 8: {
          const Outcome o = checkpoint_round_trip(fs::path(artifacts) / "roundtrip");
          report(8, o, seconds_since(t0));
          break;
        }
        default: std::cerr << "unknown criterion " << id << "\n"; return 2;
      }
    } catch (const std::exception& e) {
      report(id, {false, std::string("error: ") + e.what()}, seconds_since(t0));
    }
  }
  return all_pass ? 0 : 1;
}
