#include "perldiff/conditioning.hpp"

#include <algorithm>
#include <numeric>

namespace perldiff {

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  std::vector<std::string> sorted = tokens_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("vocabulary tokens must be unique");
  }
}

const std::vector<std::string>& scene_tokens() {
  static const std::vector<std::string> t = {"day", "night", "rain"};
  return t;
}

const std::vector<std::string>& category_tokens() {
  static const std::vector<std::string> t = {"car",     "truck",      "bus",     "pedestrian",
                                             "bicycle", "motorcycle", "barrier", "traffic_cone"};
  return t;
}

Vocabulary Vocabulary::default_vocabulary() {
  std::vector<std::string> all = scene_tokens();
  all.insert(all.end(), category_tokens().begin(), category_tokens().end());
  return Vocabulary(std::move(all));
}

int Vocabulary::index(const std::string& token) const {
  auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) throw UnknownTokenError("unknown token '" + token + "'");
  return static_cast<int>(it - tokens_.begin());
}

bool Vocabulary::contains(const std::string& token) const {
  return std::find(tokens_.begin(), tokens_.end(), token) != tokens_.end();
}

CameraLayout layout_camera(const SceneAnnotation& scene, const CameraModel& cam, int max_boxes,
                           const Vocabulary& vocab) {
  struct Visible {
    double depth;
    int index;
    Tensor mask;
  };
  std::vector<Visible> visible;
  for (std::size_t i = 0; i < scene.boxes.size(); ++i) {
    Tensor mask = rasterize_box_mask(scene.boxes[i], cam);
    if (mask.max_abs() == 0.0) continue;
    visible.push_back({cam.to_camera(scene.boxes[i].center).z(), static_cast<int>(i), std::move(mask)});
  }
  std::stable_sort(visible.begin(), visible.end(), [](const Visible& a, const Visible& b) { return a.depth < b.depth; });
  if (static_cast<int>(visible.size()) > max_boxes) visible.resize(static_cast<std::size_t>(max_boxes));

  CameraLayout out;
  const std::size_t plane = static_cast<std::size_t>(cam.height) * static_cast<std::size_t>(cam.width);
  out.masks.road = rasterize_road_mask(scene.road_polygons, cam);
  out.masks.boxes = Tensor({max_boxes, cam.height, cam.width});
  out.masks.valid.assign(static_cast<std::size_t>(max_boxes), false);
  out.category.assign(static_cast<std::size_t>(max_boxes), -1);
  out.box_index.assign(static_cast<std::size_t>(max_boxes), -1);
  std::vector<BoxCorners2D> corners(static_cast<std::size_t>(max_boxes));
  for (std::size_t s = 0; s < visible.size(); ++s) {
    const Box3D& box = scene.boxes[static_cast<std::size_t>(visible[s].index)];
    std::copy(visible[s].mask.storage().begin(), visible[s].mask.storage().end(),
              out.masks.boxes.storage().begin() + static_cast<std::ptrdiff_t>(s * plane));
    out.masks.valid[s] = true;
    out.category[s] = vocab.index(box.category);
    out.box_index[s] = visible[s].index;
    corners[s] = project_box_corners(box, cam);
  }
  out.fourier = fourier_embed(corners, cam);
  // Padded slots carry no geometry.
  for (std::size_t s = visible.size(); s < static_cast<std::size_t>(max_boxes); ++s) {
    for (int k = 0; k < kFourierWidth; ++k) out.fourier.at(static_cast<int>(s), k) = 0.0;
  }
  return out;
}

void init_condition_params(ParameterStore& store, int vocab_size, int cond_dim, CounterRng& rng) {
  auto r = rng.fork("conditioning");
  store.add_uniform("cond.embedding", {vocab_size, cond_dim}, 1, r);
  const int road_ch[4] = {1, 8, 16, 32};
  for (int l = 0; l < 3; ++l) {
    const int fan = road_ch[l] * 9;
    store.add_uniform("cond.road.conv" + std::to_string(l) + ".w", {road_ch[l + 1], road_ch[l], 3, 3}, fan, r);
    store.add_uniform("cond.road.conv" + std::to_string(l) + ".b", {road_ch[l + 1]}, fan, r);
  }
  store.add_uniform("cond.road.proj.w", {road_ch[3], cond_dim}, road_ch[3], r);
  store.add_uniform("cond.road.proj.b", {1, cond_dim}, road_ch[3], r);
  const int fuse_in = kFourierWidth + cond_dim;
  store.add_uniform("cond.fuse.w1", {fuse_in, cond_dim}, fuse_in, r);
  store.add_uniform("cond.fuse.b1", {1, cond_dim}, fuse_in, r);
  store.add_uniform("cond.fuse.w2", {cond_dim, cond_dim}, cond_dim, r);
  store.add_uniform("cond.fuse.b2", {1, cond_dim}, cond_dim, r);
  Tensor ns({1, cond_dim}), no({1, cond_dim});
  for (double& v : ns.storage()) v = 0.02 * r.normal();
  for (double& v : no.storage()) v = 0.02 * r.normal();
  store.add("cond.null_scene", std::move(ns));
  store.add("cond.null_object", std::move(no));
}

Var encode_road_map(Graph& g, ParameterStore& store, const Tensor& road_mask) {
  if (road_mask.rank() != 2) throw ShapeError("encode_road_map: expected [H, W], got " + dims_to_string(road_mask.dims()));
  Var x = g.constant(road_mask.reshaped({1, road_mask.dim(0), road_mask.dim(1)}));
  for (int l = 0; l < 3; ++l) {
    const std::string p = "cond.road.conv" + std::to_string(l);
    x = ops::silu(ops::add_channel_bias(ops::conv2d(x, g.parameter(store, p + ".w"), 2), g.parameter(store, p + ".b")));
  }
  Var pooled = ops::mean_spatial(x);
  return ops::add_row_bias(ops::matmul(pooled, g.parameter(store, "cond.road.proj.w")),
                           g.parameter(store, "cond.road.proj.b"));
}

Var encode_text(Graph& g, ParameterStore& store, std::span<const std::string> tokens, const Vocabulary& vocab) {
  if (tokens.empty()) throw std::invalid_argument("encode_text: empty description");
  Tensor select({1, vocab.size()});
  const double w = 1.0 / static_cast<double>(tokens.size());
  for (const auto& t : tokens) select[static_cast<std::size_t>(vocab.index(t))] += w;
  return ops::matmul(g.constant(std::move(select)), g.parameter(store, "cond.embedding"));
}

Var encode_categories(Graph& g, ParameterStore& store, std::span<const int> category, int vocab_size) {
  Tensor select({static_cast<int>(category.size()), vocab_size});
  for (std::size_t s = 0; s < category.size(); ++s) {
    if (category[s] >= 0) select.at(static_cast<int>(s), category[s]) = 1.0;
  }
  return ops::matmul(g.constant(std::move(select)), g.parameter(store, "cond.embedding"));
}

Var fuse_box_features(Graph& g, ParameterStore& store, Var h_g, Var h_c, const std::vector<bool>& valid) {
  if (h_g.dims()[0] != h_c.dims()[0]) {
    throw ShapeError("fuse_box_features: row counts differ " + dims_to_string(h_g.dims()) + " vs " +
                     dims_to_string(h_c.dims()));
  }
  Var x = ops::concat_cols(h_g, h_c);
  x = ops::silu(ops::add_row_bias(ops::matmul(x, g.parameter(store, "cond.fuse.w1")), g.parameter(store, "cond.fuse.b1")));
  x = ops::add_row_bias(ops::matmul(x, g.parameter(store, "cond.fuse.w2")), g.parameter(store, "cond.fuse.b2"));
  return ops::fill_invalid_rows(x, valid, g.parameter(store, "cond.null_object"));
}

BundleVars encode_bundle(Graph& g, ParameterStore& store, const Vocabulary& vocab, const SceneAnnotation& scene,
                         const CameraLayout& layout) {
  BundleVars b;
  b.h_m = encode_road_map(g, store, layout.masks.road);
  b.h_d = encode_text(g, store, scene.description_tokens, vocab);
  Var h_g = g.constant(layout.fourier);
  Var h_c = encode_categories(g, store, layout.category, vocab.size());
  b.h_b = fuse_box_features(g, store, h_g, h_c, layout.masks.valid);
  b.null_scene = g.parameter(store, "cond.null_scene");
  b.null_object = g.parameter(store, "cond.null_object");
  b.masks = layout.masks;
  return b;
}

BundleVars null_bundle(Graph& g, ParameterStore& store, int max_boxes, int height, int width) {
  BundleVars b;
  b.null_scene = g.parameter(store, "cond.null_scene");
  b.null_object = g.parameter(store, "cond.null_object");
  b.h_m = b.null_scene;
  b.h_d = b.null_scene;
  b.h_b = ops::broadcast_rows(b.null_object, max_boxes);
  b.masks.road = Tensor({height, width});
  b.masks.boxes = Tensor({max_boxes, height, width});
  b.masks.valid.assign(static_cast<std::size_t>(max_boxes), false);
  return b;
}

namespace {

ConditionBundle snapshot(const BundleVars& b) {
  return ConditionBundle{b.h_m.value(), b.h_d.value(),       b.h_b.value(), b.null_scene.value(),
                         b.null_object.value(), b.masks, b.masks.valid};
}

}  // namespace

ConditionBundle assemble_condition_bundle(const SceneAnnotation& scene, const CameraModel& cam,
                                          ParameterStore& store, const Vocabulary& vocab, int max_boxes) {
  Graph g(false);
  const CameraLayout layout = layout_camera(scene, cam, max_boxes, vocab);
  return snapshot(encode_bundle(g, store, vocab, scene, layout));
}

ConditionBundle make_null_bundle(ParameterStore& store, int max_boxes, int height, int width) {
  Graph g(false);
  return snapshot(null_bundle(g, store, max_boxes, height, width));
}

BundleVars bundle_constants(Graph& g, const ConditionBundle& bundle) {
  BundleVars b;
  b.h_m = g.constant(bundle.h_m);
  b.h_d = g.constant(bundle.h_d);
  b.h_b = g.constant(bundle.h_b);
  b.null_scene = g.constant(bundle.null_scene);
  b.null_object = g.constant(bundle.null_object);
  b.masks = bundle.masks;
  return b;
}

}  // namespace perldiff
