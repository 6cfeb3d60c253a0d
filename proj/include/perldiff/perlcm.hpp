#pragma once

#include <span>
#include <string>
#include <vector>

#include "perldiff/autograd.hpp"
#include "perldiff/conditioning.hpp"
#include "perldiff/params.hpp"

namespace perldiff {

// Bias applied to the logits of padded box keys.
inline constexpr double kPaddingBias = -1e4;

struct PerlCmSettings {
  double lambda_scene = 5.0;
  double lambda_object = 5.0;
};

// Parameters of one PerL-CM block under `prefix` (e.g. "cm1"): query, key,
// value and output projections for the scene, object, view and text
// attentions, plus the gates. Gates start at 0 and the view/text output
// projections at 0, so a fresh block is the identity.
void init_perlcm_params(ParameterStore& store, const std::string& prefix, int channels, int cond_dim,
                        CounterRng& rng);

struct AttentionResult {
  Var z;           // [HW, c] after the gated residual
  Var weights;     // key-axis softmax, [HW, keys]
};

// Keys {h_m, null_scene}; the road key's logit gets +lambda * m_s.
// `road_mask` holds HW values. a_s is column 0 of the weights.
AttentionResult scene_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix, Var z, Var h_m,
                                      Var null_scene, const Tensor& road_mask, double lambda);

// Keys {h_b rows, null_object}; box key i gets +lambda * m_b[i] when valid and
// kPaddingBias when padded, the null key gets 0. `box_masks` is [M, h, w].
AttentionResult object_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix, Var z_s, Var h_b,
                                       Var null_object, const Tensor& box_masks, const std::vector<bool>& valid,
                                       double lambda);

// z_hat_i = z_i + C(z_i, z_left, z_left) + C(z_i, z_right, z_right) with cyclic
// neighbours in rig order.
std::vector<Var> view_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix,
                                      std::span<const Var> z_b);

// Single-token cross-attention against the scene description, residual add.
Var text_cross_attention(Graph& g, ParameterStore& store, const std::string& prefix, Var z_hat, Var h_d);

// Attention maps of one block for one camera, at the block's resolution.
struct AttentionTrace {
  Tensor road;     // a_s, [h, w]
  Tensor objects;  // a_b averaged over valid box slots, [h, w]
};

// Scene, object, view and text attention in that order for every camera of
// the rig. `tokens[i]` is camera i's [h*w, c] feature; `masks[i]` is its mask
// set already downsampled to h x w.
std::vector<Var> perlcm_block(Graph& g, ParameterStore& store, const std::string& prefix,
                              std::span<const Var> tokens, std::span<const BundleVars> bundles,
                              std::span<const PerLMaskSet> masks, const PerlCmSettings& settings, int height,
                              int width, std::vector<AttentionTrace>* traces = nullptr);

// Mean over the valid box columns of a_b ([HW, M+1] weights) as an [h, w] map.
Tensor average_object_attention(const Tensor& weights, const std::vector<bool>& valid, int height, int width);

}  // namespace perldiff
