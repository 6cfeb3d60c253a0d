#include "perldiff/diffusion.hpp"

#include <cmath>
#include <numbers>

namespace perldiff {

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    const double b = beta_start + (beta_end - beta_start) * frac;
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps) throw std::out_of_range("q_sample: t=" + std::to_string(t) + " outside [1, T]");
  if (x0.dims() != eps.dims()) throw ShapeError("q_sample: noise shape differs from image shape");
  const double ab = sched.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(x0.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

void ModelConfig::validate() const {
  if (height <= 0 || width <= 0) throw std::invalid_argument("model: image size must be positive");
  if (channels.size() != 3) throw std::invalid_argument("model: exactly three U-Net levels are supported");
  if (height % 8 != 0 || width % 8 != 0) throw std::invalid_argument("model: image size must be divisible by 8");
  for (int c : channels) {
    if (c <= 0 || c % groups != 0) throw std::invalid_argument("model: channels must be positive multiples of groups");
  }
  for (int l : cm_levels) {
    if (l < 0 || l > 2) throw std::invalid_argument("model: cm_levels entries must be 0, 1 or 2");
  }
  if (cond_dim <= 0 || max_boxes <= 0 || time_dim <= 0 || time_dim % 2 != 0) {
    throw std::invalid_argument("model: cond_dim, max_boxes and an even time_dim must be positive");
  }
  if (perlcm.lambda_scene < 0.0 || perlcm.lambda_object < 0.0) throw std::invalid_argument("model: lambdas must be >= 0");
}

namespace {

constexpr int kImageChannels = 3;

void add_conv(ParameterStore& s, const std::string& name, int cout, int cin, CounterRng& r) {
  s.add_uniform(name + ".w", {cout, cin, 3, 3}, cin * 9, r);
  s.add_uniform(name + ".b", {cout}, cin * 9, r);
}

void add_res(ParameterStore& s, const std::string& name, int c, int emb, CounterRng& r) {
  s.add_constant(name + ".gn1.g", {c}, 1.0);
  s.add_constant(name + ".gn1.b", {c}, 0.0);
  add_conv(s, name + ".conv1", c, c, r);
  s.add_uniform(name + ".emb.w", {emb, c}, emb, r);
  s.add_uniform(name + ".emb.b", {1, c}, emb, r);
  s.add_constant(name + ".gn2.g", {c}, 1.0);
  s.add_constant(name + ".gn2.b", {c}, 0.0);
  add_conv(s, name + ".conv2", c, c, r);
}

bool has_level(const ModelConfig& cfg, int level) {
  for (int l : cfg.cm_levels) {
    if (l == level) return true;
  }
  return false;
}

Var to_tokens(Var x) {
  const Dims& d = x.dims();
  return ops::transpose(ops::reshape(x, {d[0], d[1] * d[2]}));
}

Var from_tokens(Var tokens, int c, int h, int w) { return ops::reshape(ops::transpose(tokens), {c, h, w}); }

}  // namespace

DenoiserModel::DenoiserModel(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
  cfg_.validate();
  CounterRng rng(seed, "init");
  const int emb = 2 * cfg_.time_dim;
  const int c0 = cfg_.channels[0], c1 = cfg_.channels[1], c2 = cfg_.channels[2];
  auto r = rng.fork("unet");
  params_.add_uniform("time.w1", {cfg_.time_dim, emb}, cfg_.time_dim, r);
  params_.add_uniform("time.b1", {1, emb}, cfg_.time_dim, r);
  params_.add_uniform("time.w2", {emb, emb}, emb, r);
  params_.add_uniform("time.b2", {1, emb}, emb, r);
  add_conv(params_, "in", c0, kImageChannels, r);
  add_res(params_, "enc0", c0, emb, r);
  add_conv(params_, "down0", c1, c0, r);
  add_res(params_, "enc1", c1, emb, r);
  add_conv(params_, "down1", c2, c1, r);
  add_res(params_, "mid", c2, emb, r);
  add_conv(params_, "up1", c1, c2 + c1, r);
  add_res(params_, "dec1", c1, emb, r);
  add_conv(params_, "up0", c0, c1 + c0, r);
  add_res(params_, "dec0", c0, emb, r);
  params_.add_constant("out.gn.g", {c0}, 1.0);
  params_.add_constant("out.gn.b", {c0}, 0.0);
  params_.add_constant("out.w", {kImageChannels, c0, 3, 3}, 0.0);
  params_.add_constant("out.b", {kImageChannels}, 0.0);
  for (int level = 0; level < 3; ++level) {
    if (has_level(cfg_, level)) {
      init_perlcm_params(params_, "cm" + std::to_string(level), cfg_.channels[static_cast<std::size_t>(level)],
                         cfg_.cond_dim, rng);
    }
  }
  init_condition_params(params_, vocab_.size(), cfg_.cond_dim, rng);
}

DenoiserModel::DenoiserModel(ModelConfig cfg, Vocabulary vocab, ParameterStore params)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), params_(std::move(params)) {
  cfg_.validate();
}

Tensor timestep_embedding(int t, int dim) {
  Tensor e({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[static_cast<std::size_t>(i)] = std::sin(t * freq);
    e[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
  }
  return e;
}

Var DenoiserModel::res_block(Graph& g, const std::string& p, Var x, Var temb) {
  auto P = [&](const std::string& n) { return g.parameter(params_, p + n); };
  Var h = ops::silu(ops::group_norm(x, cfg_.groups, P(".gn1.g"), P(".gn1.b")));
  h = ops::add_channel_bias(ops::conv2d(h, P(".conv1.w"), 1), P(".conv1.b"));
  Var e = ops::add_row_bias(ops::matmul(temb, P(".emb.w")), P(".emb.b"));
  h = ops::add_channel_bias(h, e);
  h = ops::silu(ops::group_norm(h, cfg_.groups, P(".gn2.g"), P(".gn2.b")));
  h = ops::add_channel_bias(ops::conv2d(h, P(".conv2.w"), 1), P(".conv2.b"));
  return ops::add(x, h);
}

std::vector<Var> DenoiserModel::forward(Graph& g, std::span<const Var> x_t, int t, std::span<const BundleVars> bundles,
                                        std::vector<AttentionTrace>* traces) {
  const std::size_t n = x_t.size();
  if (n == 0 || bundles.size() != n) throw ShapeError("DenoiserModel::forward: need one bundle per camera");
  auto P = [&](const std::string& name) { return g.parameter(params_, name); };
  auto conv = [&](Var x, const std::string& name, int stride) {
    return ops::add_channel_bias(ops::conv2d(x, P(name + ".w"), stride), P(name + ".b"));
  };

  Var temb = g.constant(timestep_embedding(t, cfg_.time_dim));
  temb = ops::silu(ops::add_row_bias(ops::matmul(temb, P("time.w1")), P("time.b1")));
  temb = ops::add_row_bias(ops::matmul(temb, P("time.w2")), P("time.b2"));
  Var temb_act = ops::silu(temb);

  // Downsampled masks per level and camera.
  std::vector<std::vector<PerLMaskSet>> level_masks(3);
  for (int level = 0; level < 3; ++level) {
    if (!has_level(cfg_, level)) continue;
    for (const auto& b : bundles) level_masks[static_cast<std::size_t>(level)].push_back(b.masks.downsampled(1 << level));
  }
  const int last_level = [&] {
    int best = -1;
    // Decoder order is 2, 1, 0, so the smallest configured level runs last.
    for (int l : cfg_.cm_levels) best = best < 0 ? l : std::min(best, l);
    return best;
  }();

  auto cm = [&](int level, std::vector<Var>& feats) {
    if (!has_level(cfg_, level)) return;
    const int h = cfg_.height >> level, w = cfg_.width >> level;
    const int c = cfg_.channels[static_cast<std::size_t>(level)];
    std::vector<Var> tokens;
    for (Var f : feats) tokens.push_back(to_tokens(f));
    auto out = perlcm_block(g, params_, "cm" + std::to_string(level), tokens, bundles,
                            level_masks[static_cast<std::size_t>(level)], cfg_.perlcm, h, w,
                            level == last_level ? traces : nullptr);
    for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = from_tokens(out[i], c, h, w);
  };

  std::vector<Var> skip0(n), skip1(n), h(n);
  for (std::size_t i = 0; i < n; ++i) {
    Var x = conv(x_t[i], "in", 1);
    x = res_block(g, "enc0", x, temb_act);
    skip0[i] = x;
    x = conv(x, "down0", 2);
    x = res_block(g, "enc1", x, temb_act);
    skip1[i] = x;
    x = conv(x, "down1", 2);
    h[i] = res_block(g, "mid", x, temb_act);
  }
  cm(2, h);
  for (std::size_t i = 0; i < n; ++i) {
    Var x = ops::concat0(ops::upsample2x(h[i]), skip1[i]);
    x = ops::silu(conv(x, "up1", 1));
    h[i] = res_block(g, "dec1", x, temb_act);
  }
  cm(1, h);
  for (std::size_t i = 0; i < n; ++i) {
    Var x = ops::concat0(ops::upsample2x(h[i]), skip0[i]);
    x = ops::silu(conv(x, "up0", 1));
    h[i] = res_block(g, "dec0", x, temb_act);
  }
  cm(0, h);
  std::vector<Var> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Var x = ops::silu(ops::group_norm(h[i], cfg_.groups, P("out.gn.g"), P("out.gn.b")));
    out.push_back(conv(x, "out", 1));
  }
  return out;
}

NoiseDraw draw_noise(const TrainingExample& ex, const NoiseSchedule& sched, double dropout_rate, CounterRng& rng) {
  NoiseDraw d;
  d.t = rng.uniform_int(1, sched.steps);
  for (const auto& img : ex.images) {
    Tensor e(img.dims());
    for (double& v : e.storage()) v = rng.normal();
    d.eps.push_back(std::move(e));
  }
  d.dropped = rng.uniform() < dropout_rate;
  return d;
}

Var diffusion_loss(Graph& g, DenoiserModel& model, std::span<const TrainingExample> batch,
                   std::span<const NoiseDraw> noise, const NoiseSchedule& sched) {
  if (batch.empty()) throw std::invalid_argument("diffusion_loss: empty batch");
  if (noise.size() != batch.size()) throw std::invalid_argument("diffusion_loss: one noise draw per scene");
  const ModelConfig& cfg = model.config();
  Var total;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const TrainingExample& ex = batch[s];
    const NoiseDraw& nd = noise[s];
    std::vector<BundleVars> bundles;
    std::vector<Var> xs, targets;
    for (std::size_t c = 0; c < ex.images.size(); ++c) {
      bundles.push_back(nd.dropped ? null_bundle(g, model.params(), cfg.max_boxes, cfg.height, cfg.width)
                                   : encode_bundle(g, model.params(), model.vocab(), ex.scene, ex.layouts[c]));
      xs.push_back(g.constant(q_sample(ex.images[c], nd.t, nd.eps[c], sched)));
      targets.push_back(g.constant(nd.eps[c]));
    }
    auto pred = model.forward(g, xs, nd.t, bundles);
    for (std::size_t c = 0; c < pred.size(); ++c) {
      Var term = ops::mse(pred[c], targets[c]);
      total = total.valid() ? ops::add(total, term) : term;
    }
  }
  std::size_t terms = 0;
  for (const auto& ex : batch) terms += ex.images.size();
  return ops::scale(total, 1.0 / static_cast<double>(terms));
}

double training_step(DenoiserModel& model, std::span<const TrainingExample> batch, const NoiseSchedule& sched,
                     double dropout_rate, CounterRng& rng) {
  if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw std::invalid_argument("training_step: dropout must be in [0, 1)");
  std::vector<NoiseDraw> noise;
  for (const auto& ex : batch) noise.push_back(draw_noise(ex, sched, dropout_rate, rng));
  Graph g(true);
  Var loss = diffusion_loss(g, model, batch, noise, sched);
  g.backward(loss);
  model.params().mark_all_grads();
  return loss.value()[0];
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
  if (scale < 0.0) throw std::invalid_argument("cfg: guidance scale must be >= 0");
  if (scale == 1.0) return eps_cond;
  if (scale == 0.0) return eps_uncond;
  Tensor out(eps_cond.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
  return out;
}

std::vector<Tensor> cfg_predict(const EpsPredictor& predict, const std::vector<Tensor>& x_t, int t, double scale) {
  if (scale < 0.0) throw std::invalid_argument("cfg: guidance scale must be >= 0");
  if (scale == 1.0) return predict(x_t, t, true);
  if (scale == 0.0) return predict(x_t, t, false);
  auto cond = predict(x_t, t, true);
  auto uncond = predict(x_t, t, false);
  for (std::size_t i = 0; i < cond.size(); ++i) cond[i] = cfg_combine(cond[i], uncond[i], scale);
  return cond;
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw std::invalid_argument("ddim: steps must be in [1, T]");
  std::vector<int> ts;
  if (steps == 1) return {T};
  for (int i = 0; i < steps; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(steps - 1);
    ts.push_back(T - static_cast<int>(std::lround(frac * (T - 1))));
  }
  return ts;
}

std::vector<Tensor> ddim_sample(const EpsPredictor& predict, int cameras, const Dims& shape,
                                const NoiseSchedule& sched, const SampleOptions& options, CounterRng& rng,
                                const StepCallback& on_step) {
  if (options.eta < 0.0 || options.eta > 1.0) throw std::invalid_argument("ddim: eta must be in [0, 1]");
  const auto ts = ddim_timesteps(sched.steps, options.steps);
  std::vector<Tensor> x;
  for (int c = 0; c < cameras; ++c) {
    Tensor t(shape);
    for (double& v : t.storage()) v = rng.normal();
    x.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    if (on_step) on_step(static_cast<int>(i), t);
    auto eps = cfg_predict(predict, x, t, options.guidance_scale);
    const double ab = sched.alpha_bar_at(t), ab_prev = sched.alpha_bar_at(t_prev);
    const double sigma =
        options.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / ab_prev));
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    for (int c = 0; c < cameras; ++c) {
      Tensor& xc = x[static_cast<std::size_t>(c)];
      const Tensor& ec = eps[static_cast<std::size_t>(c)];
      for (std::size_t k = 0; k < xc.size(); ++k) {
        double x0 = (xc[k] - std::sqrt(1.0 - ab) * ec[k]) / std::sqrt(ab);
        if (options.clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
        xc[k] = std::sqrt(ab_prev) * x0 + dir * ec[k];
        if (sigma > 0.0) xc[k] += sigma * rng.normal();
      }
    }
  }
  return x;
}

EpsPredictor model_predictor(DenoiserModel& model, std::vector<ConditionBundle> cond, std::vector<ConditionBundle> null,
                             std::vector<AttentionTrace>* traces) {
  return [&model, cond = std::move(cond), null = std::move(null), traces](const std::vector<Tensor>& x_t, int t,
                                                                          bool conditional) {
    Graph g(false);
    std::vector<BundleVars> bundles;
    for (const auto& b : conditional ? cond : null) bundles.push_back(bundle_constants(g, b));
    std::vector<Var> xs;
    for (const auto& x : x_t) xs.push_back(g.constant(x));
    auto out = model.forward(g, xs, t, bundles, conditional ? traces : nullptr);
    std::vector<Tensor> eps;
    for (Var v : out) eps.push_back(v.value());
    return eps;
  };
}

}  // namespace perldiff
