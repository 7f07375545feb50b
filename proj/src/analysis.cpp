#include "seqswap/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "seqswap/error.hpp"
#include "seqswap/rng.hpp"

namespace seqswap {

namespace {

// Parameters stop accumulating gradients while maps are taken.
class FrozenParameters {
 public:
  explicit FrozenParameters(const Model& model) : params_(model.parameters()) {
    for (const auto& p : params_) {
      flags_.push_back(p.tensor.requires_grad());
      p.tensor.set_requires_grad(false);
    }
  }
  ~FrozenParameters() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.set_requires_grad(flags_[i]);
  }

 private:
  std::vector<NamedTensor> params_;
  std::vector<bool> flags_;
};

void check_layer_head(const Model& model, std::size_t layer, std::size_t head, const Tensor& inputs) {
  const ModelConfig& c = model.config;
  if (layer >= c.layers) throw ContractError("analysis: layer " + std::to_string(layer) + " out of range");
  if (head >= c.heads) throw ContractError("analysis: head " + std::to_string(head) + " out of range");
  if (inputs.rank() != 2 || inputs.cols() != c.dim || inputs.rows() % c.tokens() != 0) {
    throw ShapeError("analysis: layer inputs " + shape_str(inputs.shape()) + " are not packed token rows");
  }
}

}  // namespace

std::vector<InteractionMap> interaction_maps(const Model& model, std::size_t layer, std::size_t head,
                                             const Tensor& layer_inputs, MapTarget target) {
  check_layer_head(model, layer, head, layer_inputs);
  const bool attention = model.config.mixer(layer) == MixerKind::kAttention;
  if (attention && target != MapTarget::kHead) {
    throw ContractError("analysis: branch maps need a sequential mixer");
  }
  const std::size_t t = model.config.tokens(), batch = layer_inputs.rows() / t, d = model.config.dim;
  const Segments segs = Segments::uniform(batch, t);
  const Block& block = model.blocks[layer];
  FrozenParameters frozen(model);

  std::vector<InteractionMap> maps(batch, InteractionMap{t, std::vector<double>(t * t, 0.0), false});
  // Samples never interact, so one backward per output position serves the
  // whole batch.
  for (std::size_t i = 0; i < t; ++i) {
    Tape tape;
    TapeScope scope(tape);
    Tensor x(layer_inputs.shape(), std::vector<double>(layer_inputs.data().begin(), layer_inputs.data().end()),
             true);
    const MixerTrace trace = apply_mixer(model, layer, layer_norm(x, block.ln1.gamma, block.ln1.beta), segs);
    const Tensor& u = target == MapTarget::kHead          ? trace.head_outputs[head]
                      : target == MapTarget::kForwardBranch ? trace.forward_branches[head]
                                                            : trace.reverse_branches[head];
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * t + i;
    tape.backward(sum(gather_rows(u, rows)));
    if (!x.has_grad()) continue;
    const auto g = x.grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < t; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < d; ++k) acc += std::fabs(g[(b * t + j) * d + k]);
        maps[b].values[i * t + j] = acc;
      }
  }
  return maps;
}

InteractionMap average_maps(const std::vector<InteractionMap>& maps) {
  if (maps.empty()) throw ContractError("average_maps: no maps");
  InteractionMap out{maps[0].tokens, std::vector<double>(maps[0].values.size(), 0.0), true};
  for (const auto& m : maps) {
    if (m.tokens != out.tokens) throw ShapeError("average_maps: token counts differ");
    for (std::size_t k = 0; k < m.values.size(); ++k) out.values[k] += m.values[k];
  }
  for (double& v : out.values) v /= static_cast<double>(maps.size());
  return out;
}

InteractionMap interaction_map(const Model& model, std::size_t layer, std::size_t head, const Tensor& layer_inputs,
                               MapTarget target) {
  return average_maps(interaction_maps(model, layer, head, layer_inputs, target));
}

InteractionMap attention_score_map(const Model& model, std::size_t layer, std::size_t head,
                                   const Tensor& layer_inputs) {
  check_layer_head(model, layer, head, layer_inputs);
  const auto* p = std::get_if<AttentionParams>(&model.blocks[layer].mixer);
  if (p == nullptr) throw ContractError("attention_score_map: layer " + std::to_string(layer) + " is not attention");
  NoGradScope off;
  const std::size_t t = model.config.tokens(), batch = layer_inputs.rows() / t, heads = model.config.heads;
  const Block& block = model.blocks[layer];
  const MixerTrace trace = attention_mixer(layer_norm(layer_inputs, block.ln1.gamma, block.ln1.beta), *p, heads,
                                           Segments::uniform(batch, t), true);
  InteractionMap out{t, std::vector<double>(t * t, 0.0), true};
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& probs = trace.attention_probs[b * heads + head];
    for (std::size_t k = 0; k < t * t; ++k) out.values[k] += probs[k];
  }
  for (double& v : out.values) v /= static_cast<double>(batch);
  return out;
}

std::vector<double> token_importance(const InteractionMap& map) {
  std::vector<double> s(map.tokens, 0.0);
  for (std::size_t i = 0; i < map.tokens; ++i)
    for (std::size_t j = 0; j < map.tokens; ++j) s[j] += map.at(i, j);
  return s;
}

double auprc(std::span<const std::uint8_t> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw ShapeError("auprc: labels and scores differ in length");
  const double positives = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v; }));
  if (positives == 0) throw ContractError("auprc: no positive labels");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double tp = 0, fp = 0, prev_recall = 0, area = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == s; ++k) (labels[order[k]] ? tp : fp) += 1;
    const double recall = tp / positives;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return area;
}

double random_auprc(std::span<const std::uint8_t> labels, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ContractError("random_auprc: need at least one trial");
  double total = 0;
  std::vector<double> scores(labels.size());
  for (std::size_t n = 0; n < trials; ++n) {
    Rng rng(mix_seed(seed, n));
    for (double& s : scores) s = rng.uniform();
    total += auprc(labels, scores);
  }
  return total / static_cast<double>(trials);
}

ForwardResult trace_layers(const Model& model, std::span<const double> images, std::size_t batch,
                           const std::optional<MaskSpec>& masks) {
  NoGradScope off;
  ForwardOptions o;
  o.keep_layer_inputs = true;
  if (masks) {
    o.mask_mode = masks->mode;
    o.halt_threshold = masks->threshold;
    o.retention = masks->retention;
  }
  return forward(model, images, batch, o);
}

std::vector<double> retention_profile(const Model& model, const Dataset& data, const MaskSpec& masks) {
  if (model.halting.empty()) throw ContractError("retention_profile: model has no halting heads");
  return evaluate(model, data, masks).retention_per_layer;
}

std::vector<std::size_t> token_depths(const std::vector<Mask>& masks, std::size_t seq_len) {
  if (masks.empty()) return {};
  std::vector<std::size_t> depth(masks[0].size(), 0);
  for (const Mask& m : masks) {
    if (m.size() != depth.size() || m.size() % seq_len != 0) throw ShapeError("token_depths: ragged masks");
    for (std::size_t r = 0; r < m.size(); ++r) depth[r] += m[r];
  }
  return depth;
}

}  // namespace seqswap
