#include "seqswap/model.hpp"

#include <cmath>

#include "seqswap/error.hpp"

namespace seqswap {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor linear_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return uniform_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

LayerNormParams init_layer_norm(std::size_t d) {
  return {Tensor::filled({d}, 1.0, true), Tensor::zeros({d}, true)};
}

// Halting heads start mostly open: h = sigmoid(x0 - 4) is about 0.02.
constexpr double kInitHaltGamma = 1.0;
constexpr double kInitHaltBeta = -4.0;

}  // namespace

void ModelConfig::validate() const {
  if (layers == 0 || dim == 0 || heads == 0 || image == 0 || patch == 0 || channels == 0 || classes == 0) {
    throw ContractError("model config: all sizes must be positive");
  }
  if (dim % heads != 0) throw ContractError("model config: dim must equal heads * head_dim");
  if (dim < 2) throw ContractError("model config: dim must be at least 2");
  if (image % patch != 0) throw ContractError("model config: image side must be divisible by patch side");
  if (!mixers.empty() && mixers.size() != layers) {
    throw ContractError("model config: mixer list must have one entry per layer");
  }
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"patch.weight", patch_w});
  out.push_back({"patch.bias", patch_b});
  out.push_back({"cls", cls});
  out.push_back({"pos", pos});
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const Block& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l);
    out.push_back({p + ".ln1.gamma", b.ln1.gamma});
    out.push_back({p + ".ln1.beta", b.ln1.beta});
    if (const auto* a = std::get_if<AttentionParams>(&b.mixer)) {
      out.push_back({p + ".attn.wq", a->wq});
      out.push_back({p + ".attn.wk", a->wk});
      out.push_back({p + ".attn.wv", a->wv});
      out.push_back({p + ".attn.wo", a->wo});
    } else {
      std::get<SeqMixerParams>(b.mixer).collect(p + ".seq", out);
    }
    out.push_back({p + ".ln2.gamma", b.ln2.gamma});
    out.push_back({p + ".ln2.beta", b.ln2.beta});
    out.push_back({p + ".mlp.w1", b.w1});
    out.push_back({p + ".mlp.b1", b.b1});
    out.push_back({p + ".mlp.w2", b.w2});
    out.push_back({p + ".mlp.b2", b.b2});
  }
  out.push_back({"norm.gamma", norm.gamma});
  out.push_back({"norm.beta", norm.beta});
  out.push_back({"head.weight", head_w});
  out.push_back({"head.bias", head_b});
  for (std::size_t l = 0; l < halting.size(); ++l) {
    out.push_back({"halt." + std::to_string(l) + ".gamma", halting[l].gamma});
    out.push_back({"halt." + std::to_string(l) + ".beta", halting[l].beta});
  }
  return out;
}

Model Model::clone() const {
  Rng scratch(0);
  Model copy = init_model(config, scratch);
  const auto src = parameters();
  const auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.data().begin());
    dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  return copy;
}

Model init_model(const ModelConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.dim;
  Model m;
  m.config = config;
  m.patch_w = linear_weight(config.patch_features(), d, rng);
  m.patch_b = Tensor::zeros({d}, true);
  m.cls = normal_tensor({1, d}, 0.02, rng);
  m.pos = normal_tensor({config.tokens(), d}, 0.02, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    Block b;
    b.ln1 = init_layer_norm(d);
    if (config.mixer(l) == MixerKind::kAttention) {
      AttentionParams a;
      a.wq = linear_weight(d, d, rng);
      a.wk = linear_weight(d, d, rng);
      a.wv = linear_weight(d, d, rng);
      a.wo = linear_weight(d, d, rng);
      b.mixer = std::move(a);
    } else {
      b.mixer = init_seq_mixer(config.mixer(l), d, config.heads, config.state_dim, rng);
    }
    b.ln2 = init_layer_norm(d);
    b.w1 = linear_weight(d, 4 * d, rng);
    b.b1 = Tensor::zeros({4 * d}, true);
    b.w2 = linear_weight(4 * d, d, rng);
    b.b2 = Tensor::zeros({d}, true);
    m.blocks.push_back(std::move(b));
  }
  m.norm = init_layer_norm(d);
  m.head_w = linear_weight(d, config.classes, rng);
  m.head_b = Tensor::zeros({config.classes}, true);
  if (config.halting) {
    for (std::size_t l = 0; l < config.layers; ++l) {
      m.halting.push_back({Tensor::filled({1}, kInitHaltGamma, true), Tensor::filled({1}, kInitHaltBeta, true)});
    }
  }
  return m;
}

std::size_t parameter_count(const Model& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor.size();
  return n;
}

std::string mixer_prefix(const Model& model, std::size_t layer) {
  const bool attn = model.config.mixer(layer) == MixerKind::kAttention;
  return "blocks." + std::to_string(layer) + (attn ? ".attn." : ".seq.");
}

bool is_mixer_param(const std::string& name, std::size_t layer) {
  const std::string p = "blocks." + std::to_string(layer) + ".";
  return name.rfind(p + "attn.", 0) == 0 || name.rfind(p + "seq.", 0) == 0;
}

bool is_halting_param(const std::string& name, std::size_t layer) {
  return name.rfind("halt." + std::to_string(layer) + ".", 0) == 0;
}

Model replace_layers(const Model& teacher, const std::set<std::size_t>& layers, MixerKind kind, Rng& rng) {
  if (kind == MixerKind::kAttention) throw ContractError("replace_layers: substitute must be sequential");
  for (std::size_t l : layers) {
    if (l >= teacher.config.layers) {
      throw ContractError("replace_layers: layer " + std::to_string(l) + " outside [0, " +
                          std::to_string(teacher.config.layers) + ")");
    }
  }
  Model student = teacher.clone();
  if (student.config.mixers.empty()) student.config.mixers.assign(student.config.layers, MixerKind::kAttention);
  for (std::size_t l : layers) {
    student.blocks[l].mixer = init_seq_mixer(kind, student.config.dim, student.config.heads,
                                             student.config.state_dim, rng);
    student.config.mixers[l] = kind;
  }
  return student;
}

// ------------------------------------------------------------------ forward

Tensor patchify(std::span<const double> images, std::size_t batch, const ModelConfig& config) {
  const std::size_t side = config.image, p = config.patch, c = config.channels, g = config.grid();
  if (images.size() != batch * config.image_size()) {
    throw ShapeError("patchify: expected " + std::to_string(batch) + " images of " +
                     std::to_string(side) + "x" + std::to_string(side) + "x" + std::to_string(c));
  }
  const std::size_t f = config.patch_features();
  std::vector<double> out(batch * config.patches() * f);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* img = images.data() + b * config.image_size();
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        double* row = out.data() + ((b * g + gy) * g + gx) * f;
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            const std::size_t y = gy * p + py, x = gx * p + px;
            for (std::size_t ch = 0; ch < c; ++ch) row[(py * p + px) * c + ch] = img[(y * side + x) * c + ch];
          }
        }
      }
    }
  }
  return Tensor({batch * config.patches(), f}, std::move(out));
}

Tensor embed_tokens(const Model& model, const Tensor& patches, std::size_t batch) {
  const ModelConfig& cfg = model.config;
  const std::size_t t = cfg.tokens(), np = cfg.patches();
  const Tensor proj = add_bias(matmul(patches, model.patch_w), model.patch_b);
  std::vector<std::size_t> patch_rows(batch * np), cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    cls_rows[b] = b * t;
    for (std::size_t i = 0; i < np; ++i) patch_rows[b * np + i] = b * t + 1 + i;
  }
  const Tensor tokens = add(scatter_rows(proj, patch_rows, batch * t),
                            scatter_rows(tile_rows(model.cls, batch), cls_rows, batch * t));
  return add(tokens, tile_rows(model.pos, batch));
}

Tensor patch_embed(const Model& model, const Tensor& image) {
  const ModelConfig& cfg = model.config;
  const Shape want{cfg.image, cfg.image, cfg.channels};
  if (image.shape() != want && !(image.rank() == 2 && cfg.channels == 1 && image.shape() == Shape{cfg.image, cfg.image})) {
    throw ShapeError("patch_embed: image " + shape_str(image.shape()) + " does not match config " + shape_str(want));
  }
  return embed_tokens(model, patchify(image.data(), 1, cfg), 1);
}

MixerTrace attention_mixer(const Tensor& u, const AttentionParams& p, std::size_t heads,
                           const Segments& segs, bool keep_probs) {
  MixerTrace trace;
  const Tensor q = matmul(u, p.wq);
  const Tensor k = matmul(u, p.wk);
  const Tensor v = matmul(u, p.wv);
  const Tensor o = attention(q, k, v, heads, segs, keep_probs ? &trace.attention_probs : nullptr);
  const std::size_t dh = u.cols() / heads;
  for (std::size_t h = 0; h < heads; ++h) trace.head_outputs.push_back(slice_cols(o, h * dh, (h + 1) * dh));
  trace.out = matmul(o, p.wo);
  return trace;
}

MixerTrace apply_mixer(const Model& model, std::size_t layer, const Tensor& u, const Segments& segs,
                       bool keep_probs) {
  const Block& b = model.blocks.at(layer);
  if (const auto* a = std::get_if<AttentionParams>(&b.mixer)) {
    return attention_mixer(u, *a, model.config.heads, segs, keep_probs);
  }
  return multihead_bidi_mixer(u, std::get<SeqMixerParams>(b.mixer), segs);
}

Tensor block_forward(const Model& model, std::size_t layer, const Tensor& x, std::size_t seq_len,
                     const Mask* mask, Tensor* mixer_out, bool stub_mixer) {
  const Block& b = model.blocks.at(layer);
  if (x.rank() != 2 || x.cols() != model.config.dim || seq_len == 0 || x.rows() % seq_len != 0) {
    throw ShapeError("block_forward: input " + shape_str(x.shape()) + " is not packed sequences of width " +
                     std::to_string(model.config.dim));
  }
  const bool masked = mask != nullptr && !all_active(*mask);
  const Tensor u = layer_norm(x, b.ln1.gamma, b.ln1.beta);
  Tensor z;
  std::vector<double> weights;
  if (masked) {
    if (mask->size() != x.rows()) throw ShapeError("block_forward: mask length differs from rows");
    weights.assign(mask->begin(), mask->end());
    if (stub_mixer) {
      z = mask_rows(u, weights);
    } else {
      const TokenIndex idx = active_index(*mask, seq_len);
      z = restore_tokens(apply_mixer(model, layer, compress_tokens(u, idx), idx.segments).out, idx, x.rows());
    }
  } else {
    z = stub_mixer ? u : apply_mixer(model, layer, u, Segments::uniform(x.rows() / seq_len, seq_len)).out;
  }
  if (mixer_out) *mixer_out = z;
  const Tensor y = add(x, z);
  const Tensor hidden = gelu(add_bias(matmul(layer_norm(y, b.ln2.gamma, b.ln2.beta), b.w1), b.b1));
  Tensor mlp = add_bias(matmul(hidden, b.w2), b.b2);
  if (masked) mlp = mask_rows(mlp, weights);
  return add(y, mlp);
}

ForwardResult forward(const Model& model, std::span<const double> images, std::size_t batch,
                      const ForwardOptions& options) {
  const ModelConfig& cfg = model.config;
  const std::size_t t = cfg.tokens(), rows = batch * t;
  const bool needs_halting = options.mask_mode == MaskMode::kThreshold ||
                             options.mask_mode == MaskMode::kFixedRetention;
  if (needs_halting && model.halting.empty()) {
    throw ContractError("forward: mask mode requires a model with halting heads");
  }
  if (options.mask_mode == MaskMode::kExternal &&
      (options.external_masks == nullptr || options.external_masks->size() != cfg.layers)) {
    throw ContractError("forward: external mask mode needs one mask per layer");
  }

  ForwardResult res;
  res.masks.reserve(cfg.layers);  // prev points into this vector
  Tensor x = embed_tokens(model, patchify(images, batch, cfg), batch);
  Tensor cumulative = Tensor::zeros({rows, 1});
  const Mask* prev = nullptr;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    if (options.keep_layer_inputs) res.layer_inputs.push_back(x);
    if (!model.halting.empty()) {
      Tensor h = halting_scores(x, model.halting[l]);
      cumulative = update_cumulative(cumulative, h);
      res.halting_scores.push_back(std::move(h));
      res.cumulative.push_back(cumulative);
    }
    Mask mask;
    switch (options.mask_mode) {
      case MaskMode::kNone: mask.assign(rows, 1); break;
      case MaskMode::kThreshold:
        mask = threshold_masks(cumulative.data(), t, options.halt_threshold, prev);
        break;
      case MaskMode::kFixedRetention:
        mask = fixed_retention_masks(cumulative.data(), t, options.retention, prev);
        break;
      case MaskMode::kExternal:
        mask = (*options.external_masks)[l];
        if (mask.size() != rows) throw ShapeError("forward: external mask length differs from rows");
        break;
    }
    res.masks.push_back(std::move(mask));
    prev = &res.masks.back();
    Tensor z;
    x = block_forward(model, l, x, t, prev, options.keep_mixer_outputs ? &z : nullptr, options.stub_mixers);
    if (options.keep_mixer_outputs) res.mixer_outputs.push_back(std::move(z));
  }
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * t;
  const Tensor pooled = layer_norm(gather_rows(x, cls_rows), model.norm.gamma, model.norm.beta);
  res.logits = add_bias(matmul(pooled, model.head_w), model.head_b);
  return res;
}

Tensor classify_forward(const Model& model, const Tensor& image) {
  const ForwardResult r = forward(model, image.data(), 1);
  return reshape(r.logits, {model.config.classes});
}

}  // namespace seqswap
