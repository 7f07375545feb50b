#pragma once

// Token dependency analysis: gradient interaction maps, token importance,
// agreement between retained tokens and importance (AUPRC), and retention
// profiles.

#include <cstdint>
#include <span>
#include <vector>

#include "seqswap/data.hpp"
#include "seqswap/distill.hpp"
#include "seqswap/model.hpp"

namespace seqswap {

// T x T, row i = output token, column j = input token.
struct InteractionMap {
  std::size_t tokens = 0;
  std::vector<double> values;
  bool batch_averaged = false;

  double at(std::size_t i, std::size_t j) const { return values[i * tokens + j]; }
};

// Which per-head signal is differentiated. Branch targets exist only for
// sequential mixers.
enum class MapTarget { kHead, kForwardBranch, kReverseBranch };

// Maps of one (layer, head) for every sample of a packed batch of layer
// inputs [B*T x D]: M_ij = sum_d |d(sum_k u_ik) / d x_jd|.
std::vector<InteractionMap> interaction_maps(const Model& model, std::size_t layer, std::size_t head,
                                             const Tensor& layer_inputs, MapTarget target = MapTarget::kHead);

// Arithmetic mean of per-sample maps.
InteractionMap average_maps(const std::vector<InteractionMap>& maps);

InteractionMap interaction_map(const Model& model, std::size_t layer, std::size_t head, const Tensor& layer_inputs,
                               MapTarget target = MapTarget::kHead);

// Batch-averaged post-softmax attention probabilities of an attention layer.
InteractionMap attention_score_map(const Model& model, std::size_t layer, std::size_t head,
                                   const Tensor& layer_inputs);

// Column sums of a map.
std::vector<double> token_importance(const InteractionMap& map);

// Average precision with tied scores grouped into one threshold.
double auprc(std::span<const std::uint8_t> labels, std::span<const double> scores);

// Mean AUPRC of uniform-random scores against the same labels.
double random_auprc(std::span<const std::uint8_t> labels, std::size_t trials, std::uint64_t seed);

// Layer inputs x^(l) of a batch, with masks produced as in `masks`
// (no masks when empty).
ForwardResult trace_layers(const Model& model, std::span<const double> images, std::size_t batch,
                           const std::optional<MaskSpec>& masks);

// Mean fraction of patch tokens active per layer.
std::vector<double> retention_profile(const Model& model, const Dataset& data, const MaskSpec& masks);

// Number of layers each token of each sample stays active, [B x T].
std::vector<std::size_t> token_depths(const std::vector<Mask>& masks, std::size_t seq_len);

}  // namespace seqswap
