#pragma once

#include <span>
#include <string>
#include <vector>

#include "perldiff/autograd.hpp"
#include "perldiff/geometry.hpp"
#include "perldiff/params.hpp"
#include "perldiff/scene.hpp"

namespace perldiff {

class UnknownTokenError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Ordered token list; the embedding table itself lives in the ParameterStore
// under "cond.embedding" ([size, C]) so it trains with everything else.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  static Vocabulary default_vocabulary();

  int index(const std::string& token) const;
  bool contains(const std::string& token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  int size() const { return static_cast<int>(tokens_.size()); }
  bool operator==(const Vocabulary&) const = default;

 private:
  std::vector<std::string> tokens_;
};

const std::vector<std::string>& scene_tokens();     // day, night, rain
const std::vector<std::string>& category_tokens();  // 8 object categories

// Geometry-only products for one camera: masks, Fourier features and
// per-slot category ids (-1 for padded slots).
struct CameraLayout {
  PerLMaskSet masks;
  Tensor fourier;               // [M, 256]
  std::vector<int> category;    // [M]
  std::vector<int> box_index;   // [M], index into scene.boxes or -1
};

// Visible boxes (non-empty mask) sorted by camera depth of their center,
// truncated to the nearest `max_boxes`, padded to exactly `max_boxes` slots.
CameraLayout layout_camera(const SceneAnnotation& scene, const CameraModel& cam, int max_boxes,
                           const Vocabulary& vocab);

void init_condition_params(ParameterStore& store, int vocab_size, int cond_dim, CounterRng& rng);

// Three stride-2 convolutions, SiLU, global average pool, linear to [1, C].
Var encode_road_map(Graph& g, ParameterStore& store, const Tensor& road_mask);
// Mean of the token embeddings, [1, C].
Var encode_text(Graph& g, ParameterStore& store, std::span<const std::string> tokens, const Vocabulary& vocab);
// Rows of the embedding table for each slot; padded slots (-1) give zeros.
Var encode_categories(Graph& g, ParameterStore& store, std::span<const int> category, int vocab_size);
// Two-layer MLP over [H_g, H_c]; padded rows become the learned null object.
Var fuse_box_features(Graph& g, ParameterStore& store, Var h_g, Var h_c, const std::vector<bool>& valid);

// Per-camera conditioning as graph values.
struct BundleVars {
  Var h_m;          // [1, C]
  Var h_d;          // [1, C]
  Var h_b;          // [M, C]
  Var null_scene;   // [1, C]
  Var null_object;  // [1, C]
  PerLMaskSet masks;
};

BundleVars encode_bundle(Graph& g, ParameterStore& store, const Vocabulary& vocab, const SceneAnnotation& scene,
                         const CameraLayout& layout);
// All conditions omitted: null tokens everywhere, zero masks, no valid slot.
BundleVars null_bundle(Graph& g, ParameterStore& store, int max_boxes, int height, int width);

// Value snapshot of BundleVars.
struct ConditionBundle {
  Tensor h_m, h_d, h_b, null_scene, null_object;
  PerLMaskSet masks;
  std::vector<bool> valid;
};

ConditionBundle assemble_condition_bundle(const SceneAnnotation& scene, const CameraModel& cam,
                                          ParameterStore& store, const Vocabulary& vocab, int max_boxes);
ConditionBundle make_null_bundle(ParameterStore& store, int max_boxes, int height, int width);
BundleVars bundle_constants(Graph& g, const ConditionBundle& bundle);

}  // namespace perldiff
