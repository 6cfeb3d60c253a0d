#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "perldiff/autograd.hpp"
#include "perldiff/conditioning.hpp"
#include "perldiff/params.hpp"
#include "perldiff/perlcm.hpp"

namespace perldiff {

struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;       // index t - 1 for t = 1..T
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  // alpha_bar(0) == 1 by convention.
  double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t - 1)); }
};

// Linear betas from beta_start to beta_end inclusive.
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

struct ModelConfig {
  int height = 32;
  int width = 48;
  int cond_dim = 64;
  std::vector<int> channels = {32, 64, 64};  // per U-Net level; level l is downsampled by 2^l
  int max_boxes = 16;
  std::vector<int> cm_levels = {1, 2};       // levels that carry a PerL-CM block
  PerlCmSettings perlcm;
  int time_dim = 64;
  int groups = 8;

  void validate() const;
};

// U-Net with a PerL-CM block at each level in `cm_levels`. All cameras of a
// rig go through the network in lockstep because view attention couples them.
class DenoiserModel {
 public:
  DenoiserModel(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed);
  // Wraps an existing parameter set (e.g. a loaded checkpoint).
  DenoiserModel(ModelConfig cfg, Vocabulary vocab, ParameterStore params);

  // eps prediction per camera, each [3, H, W]. When `traces` is given it
  // receives the attention maps of the last PerL-CM block.
  std::vector<Var> forward(Graph& g, std::span<const Var> x_t, int t, std::span<const BundleVars> bundles,
                           std::vector<AttentionTrace>* traces = nullptr);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

 private:
  Var res_block(Graph& g, const std::string& prefix, Var x, Var temb);

  ModelConfig cfg_;
  Vocabulary vocab_;
  ParameterStore params_;
};

Tensor timestep_embedding(int t, int dim);

// Everything a training step needs about one scene.
struct TrainingExample {
  SceneAnnotation scene;
  std::vector<CameraLayout> layouts;  // per camera
  std::vector<Tensor> images;         // per camera, [3, H, W] in [-1, 1]
};

// Randomness of one scene's loss term, fixed up front.
struct NoiseDraw {
  int t = 1;
  std::vector<Tensor> eps;  // per camera
  bool dropped = false;     // all conditions replaced by the null bundle
};

NoiseDraw draw_noise(const TrainingExample& ex, const NoiseSchedule& sched, double dropout_rate, CounterRng& rng);

// Mean over scenes and cameras of MSE(eps_pred, eps).
Var diffusion_loss(Graph& g, DenoiserModel& model, std::span<const TrainingExample> batch,
                   std::span<const NoiseDraw> noise, const NoiseSchedule& sched);

// Samples t, eps and condition dropout, builds the loss and accumulates
// gradients into the model's parameter store. Returns the loss.
double training_step(DenoiserModel& model, std::span<const TrainingExample> batch, const NoiseSchedule& sched,
                     double dropout_rate, CounterRng& rng);

// eps_uncond + s (eps_cond - eps_uncond); exact at s = 0 and s = 1.
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale);

// Conditional/unconditional noise prediction for every camera of a rig.
using EpsPredictor = std::function<std::vector<Tensor>(const std::vector<Tensor>& x_t, int t, bool conditional)>;

std::vector<Tensor> cfg_predict(const EpsPredictor& predict, const std::vector<Tensor>& x_t, int t, double scale);

struct SampleOptions {
  int steps = 50;
  double guidance_scale = 5.0;
  double eta = 0.0;
  bool clip_x0 = true;
};

// Evenly strided descending timesteps from T to 1 (just {T} for one step).
std::vector<int> ddim_timesteps(int T, int steps);

using StepCallback = std::function<void(int step_index, int t)>;

// DDIM from x_T ~ N(0, I) drawn from `rng`. `shape` is the per-camera image
// shape; `cameras` the rig size.
std::vector<Tensor> ddim_sample(const EpsPredictor& predict, int cameras, const Dims& shape,
                                const NoiseSchedule& sched, const SampleOptions& options, CounterRng& rng,
                                const StepCallback& on_step = nullptr);

// Model-backed predictor over fixed condition/null bundles. When `traces` is
// non-null it holds the conditional pass's attention maps of the last call.
EpsPredictor model_predictor(DenoiserModel& model, std::vector<ConditionBundle> cond,
                             std::vector<ConditionBundle> null, std::vector<AttentionTrace>* traces = nullptr);

}  // namespace perldiff
