#pragma once

// Pre-norm vision transformer with one pluggable token mixer per layer.
// Batches are packed row-wise: sample b owns rows [b*T, (b+1)*T) with the
// class token first, followed by patches in raster order.

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "seqswap/halting.hpp"
#include "seqswap/rng.hpp"
#include "seqswap/seqmix.hpp"
#include "seqswap/tensor.hpp"

namespace seqswap {

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t image = 28;
  std::size_t patch = 7;
  std::size_t channels = 1;
  std::size_t classes = 10;
  std::size_t state_dim = 0;  // 0 selects the head width
  bool halting = false;
  std::vector<MixerKind> mixers;  // one per layer; empty means all attention

  std::size_t head_dim() const { return dim / heads; }
  std::size_t grid() const { return image / patch; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t tokens() const { return patches() + 1; }
  std::size_t patch_features() const { return patch * patch * channels; }
  std::size_t image_size() const { return image * image * channels; }
  MixerKind mixer(std::size_t layer) const {
    return mixers.empty() ? MixerKind::kAttention : mixers.at(layer);
  }

  void validate() const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [D x D] each
};

struct Block {
  LayerNormParams ln1;
  std::variant<AttentionParams, SeqMixerParams> mixer;
  LayerNormParams ln2;
  Tensor w1, b1;  // [D x 4D], [4D]
  Tensor w2, b2;  // [4D x D], [D]
};

struct Model {
  ModelConfig config;
  Tensor patch_w, patch_b;  // [P*P*C x D], [D]
  Tensor cls;               // [1 x D]
  Tensor pos;               // [T x D]
  std::vector<Block> blocks;
  LayerNormParams norm;
  Tensor head_w, head_b;  // [D x K], [K]
  std::vector<HaltingParams> halting;  // one per layer when config.halting

  // Every learnable tensor with a stable dotted name, in manifest order.
  std::vector<NamedTensor> parameters() const;
  Model clone() const;
};

Model init_model(const ModelConfig& config, Rng& rng);
std::size_t parameter_count(const Model& model);

// Name prefix of the token-mixer parameters of one layer.
std::string mixer_prefix(const Model& model, std::size_t layer);
bool is_mixer_param(const std::string& name, std::size_t layer);
bool is_halting_param(const std::string& name, std::size_t layer);

// Copy of the teacher whose mixers in `layers` are freshly initialised
// sequential mixers of `kind`. Everything else is copied by value.
Model replace_layers(const Model& teacher, const std::set<std::size_t>& layers, MixerKind kind, Rng& rng);

// ---- forward ----

enum class MaskMode { kNone, kThreshold, kFixedRetention, kExternal };

struct ForwardOptions {
  MaskMode mask_mode = MaskMode::kNone;
  double halt_threshold = 1.0;
  double retention = 1.0;
  const std::vector<Mask>* external_masks = nullptr;  // per layer, per packed row
  bool keep_mixer_outputs = false;
  bool keep_layer_inputs = false;
  bool stub_mixers = false;  // identity token mixers, for fixed-cost timing
};

struct ForwardResult {
  Tensor logits;                       // [B x K]
  std::vector<Tensor> mixer_outputs;   // z^(l), [B*T x D], zero at inactive rows
  std::vector<Tensor> layer_inputs;    // x^(l)
  std::vector<Tensor> halting_scores;  // h^(l), [B*T x 1]
  std::vector<Tensor> cumulative;      // R^(l), [B*T x 1]
  std::vector<Mask> masks;             // per layer, per packed row
};

// Constant [B*P x P*P*C] matrix of flattened patches (row-major within a
// patch, channels innermost) from B images stored H x W x C.
Tensor patchify(std::span<const double> images, std::size_t batch, const ModelConfig& config);

// Token embeddings [B*T x D] from a patchified batch.
Tensor embed_tokens(const Model& model, const Tensor& patches, std::size_t batch);

// Single image [H x W x C] to its [T x D] token embeddings.
Tensor patch_embed(const Model& model, const Tensor& image);

MixerTrace attention_mixer(const Tensor& u, const AttentionParams& p, std::size_t heads,
                           const Segments& segs, bool keep_probs = false);

MixerTrace apply_mixer(const Model& model, std::size_t layer, const Tensor& u, const Segments& segs,
                       bool keep_probs = false);

// One residual block over packed rows. With a mask, the mixer sees only
// active tokens and inactive rows pass through unchanged.
Tensor block_forward(const Model& model, std::size_t layer, const Tensor& x, std::size_t seq_len,
                     const Mask* mask, Tensor* mixer_out = nullptr, bool stub_mixer = false);

ForwardResult forward(const Model& model, std::span<const double> images, std::size_t batch,
                      const ForwardOptions& options = {});

// Logits [K] for one image [H x W x C].
Tensor classify_forward(const Model& model, const Tensor& image);

}  // namespace seqswap
