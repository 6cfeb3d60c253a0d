#include "perldiff/perlcm.hpp"

#include <cmath>

namespace perldiff {

namespace {

Var param(Graph& g, ParameterStore& store, const std::string& name) { return g.parameter(store, name); }

// softmax(Q K^T / sqrt(d) + bias)
Var attention_weights(Var q, Var k, const Tensor* bias) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.dims()[1]));
  Var logits = ops::scale(ops::matmul_nt(q, k), inv);
  if (bias != nullptr) logits = ops::add(logits, q.graph->constant(*bias));
  return ops::softmax_lastdim(logits);
}

}  // namespace

void init_perlcm_params(ParameterStore& store, const std::string& prefix, int channels, int cond_dim,
                        CounterRng& rng) {
  auto r = rng.fork(prefix);
  for (const char* kind : {"scene", "object", "text"}) {
    const std::string p = prefix + "." + kind;
    store.add_uniform(p + ".q", {channels, channels}, channels, r);
    store.add_uniform(p + ".k", {cond_dim, channels}, cond_dim, r);
    store.add_uniform(p + ".v", {cond_dim, channels}, cond_dim, r);
  }
  store.add_uniform(prefix + ".view.q", {channels, channels}, channels, r);
  store.add_uniform(prefix + ".view.k", {channels, channels}, channels, r);
  store.add_uniform(prefix + ".view.v", {channels, channels}, channels, r);
  store.add_uniform(prefix + ".scene.o", {channels, channels}, channels, r);
  store.add_uniform(prefix + ".object.o", {channels, channels}, channels, r);
  store.add_constant(prefix + ".view.o", {channels, channels}, 0.0);
  store.add_constant(prefix + ".text.o", {channels, channels}, 0.0);
  store.add_constant(prefix + ".scene.gamma", {1}, 0.0);
  store.add_constant(prefix + ".object.gamma", {1}, 0.0);
}

AttentionResult scene_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix, Var z, Var h_m,
                                      Var null_scene, const Tensor& road_mask, double lambda) {
  const int hw = z.dims()[0];
  if (static_cast<int>(road_mask.size()) != hw) {
    throw ShapeError("scene_cross_attention: road mask has " + std::to_string(road_mask.size()) + " pixels, features " +
                     std::to_string(hw));
  }
  const std::string p = prefix + ".scene";
  Var keys = ops::concat0(h_m, null_scene);
  Var q = ops::matmul(z, param(g, store, p + ".q"));
  Var k = ops::matmul(keys, param(g, store, p + ".k"));
  Var v = ops::matmul(keys, param(g, store, p + ".v"));
  Tensor bias({hw, 2});
  for (int i = 0; i < hw; ++i) bias.at(i, 0) = lambda * road_mask[static_cast<std::size_t>(i)];
  Var a = attention_weights(q, k, &bias);
  Var out = ops::matmul(ops::matmul(a, v), param(g, store, p + ".o"));
  return {ops::add(ops::scale_by(out, param(g, store, p + ".gamma")), z), a};
}

AttentionResult object_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix, Var z_s, Var h_b,
                                       Var null_object, const Tensor& box_masks, const std::vector<bool>& valid,
                                       double lambda) {
  const int hw = z_s.dims()[0];
  const int m = h_b.dims()[0];
  if (static_cast<int>(valid.size()) != m || box_masks.size() != static_cast<std::size_t>(m) * static_cast<std::size_t>(hw)) {
    throw ShapeError("object_cross_attention: " + std::to_string(m) + " box features, " + std::to_string(valid.size()) +
                     " flags, masks " + dims_to_string(box_masks.dims()) + " for " + std::to_string(hw) + " pixels");
  }
  const std::string p = prefix + ".object";
  Var keys = ops::concat0(h_b, null_object);
  Var q = ops::matmul(z_s, param(g, store, p + ".q"));
  Var k = ops::matmul(keys, param(g, store, p + ".k"));
  Var v = ops::matmul(keys, param(g, store, p + ".v"));
  Tensor bias({hw, m + 1});
  for (int i = 0; i < m; ++i) {
    const double* mask = box_masks.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(hw);
    const bool ok = valid[static_cast<std::size_t>(i)];
    for (int px = 0; px < hw; ++px) bias.at(px, i) = ok ? lambda * mask[px] : kPaddingBias;
  }
  Var a = attention_weights(q, k, &bias);
  Var out = ops::matmul(ops::matmul(a, v), param(g, store, p + ".o"));
  return {ops::add(ops::scale_by(out, param(g, store, p + ".gamma")), z_s), a};
}

std::vector<Var> view_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix,
                                      std::span<const Var> z_b) {
  const std::size_t n = z_b.size();
  if (n == 0) throw std::invalid_argument("view_cross_attention: empty camera rig");
  const std::string p = prefix + ".view";
  Var wq = param(g, store, p + ".q"), wk = param(g, store, p + ".k"), wv = param(g, store, p + ".v");
  Var wo = param(g, store, p + ".o");
  std::vector<Var> q, k, v;
  for (const Var& z : z_b) {
    if (z.dims() != z_b[0].dims()) throw ShapeError("view_cross_attention: cameras disagree on feature shape");
    q.push_back(ops::matmul(z, wq));
    k.push_back(ops::matmul(z, wk));
    v.push_back(ops::matmul(z, wv));
  }
  std::vector<Var> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t left = (i + n - 1) % n;
    const std::size_t right = (i + 1) % n;
    Var from_left = ops::matmul(attention_weights(q[i], k[left], nullptr), v[left]);
    Var from_right = ops::matmul(attention_weights(q[i], k[right], nullptr), v[right]);
    out.push_back(ops::add(z_b[i], ops::matmul(ops::add(from_left, from_right), wo)));
  }
  return out;
}

Var text_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix, Var z_hat, Var h_d) {
  const std::string p = prefix + ".text";
  Var q = ops::matmul(z_hat, param(g, store, p + ".q"));
  Var k = ops::matmul(h_d, param(g, store, p + ".k"));
  Var v = ops::matmul(h_d, param(g, store, p + ".v"));
  Var a = attention_weights(q, k, nullptr);
  return ops::add(z_hat, ops::matmul(ops::matmul(a, v), param(g, store, p + ".o")));
}

Tensor average_object_attention(const Tensor& weights, const std::vector<bool>& valid, int height, int width) {
  Tensor out({height, width});
  int count = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    ++count;
    for (int px = 0; px < height * width; ++px) out[static_cast<std::size_t>(px)] += weights.at(px, static_cast<int>(i));
  }
  if (count > 0) {
    for (double& v : out.storage()) v /= count;
  }
  return out;
}

std::vector<Var> perlcm_block(Graph& g, ParameterStore& store, const std::string& prefix,
                              std::span<const Var> tokens, std::span<const BundleVars> bundles,
                              std::span<const PerLMaskSet> masks, const PerlCmSettings& settings, int height,
                              int width, std::vector<AttentionTrace>* traces) {
  const std::size_t n = tokens.size();
  if (bundles.size() != n || masks.size() != n) throw ShapeError("perlcm_block: per-camera inputs disagree in count");
  std::vector<Var> z_b;
  z_b.reserve(n);
  if (traces != nullptr) traces->clear();
  for (std::size_t i = 0; i < n; ++i) {
    const BundleVars& b = bundles[i];
    auto scene = scene_cross_attention(g, store, prefix, tokens[i], b.h_m, b.null_scene, masks[i].road,
                                       settings.lambda_scene);
    auto object = object_cross_attention(g, store, prefix, scene.z, b.h_b, b.null_object, masks[i].boxes,
                                         masks[i].valid, settings.lambda_object);
    z_b.push_back(object.z);
    if (traces != nullptr) {
      AttentionTrace t;
      t.road = Tensor({height, width});
      const Tensor& as = scene.weights.value();
      for (int px = 0; px < height * width; ++px) t.road[static_cast<std::size_t>(px)] = as.at(px, 0);
      t.objects = average_object_attention(object.weights.value(), masks[i].valid, height, width);
      traces->push_back(std::move(t));
    }
  }
  std::vector<Var> z_hat = view_cross_attention(g, store, prefix, z_b);
  std::vector<Var> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(text_cross_attention(g, store, prefix, z_hat[i], bundles[i].h_d));
  return out;
}

}  // namespace perldiff
