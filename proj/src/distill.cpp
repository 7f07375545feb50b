#include "seqswap/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "seqswap/error.hpp"
#include "seqswap/optim.hpp"
#include "seqswap/rng.hpp"

namespace seqswap {

namespace {

void check_layer_set(const std::set<std::size_t>& layers, std::size_t available, const char* what) {
  for (std::size_t l : layers) {
    if (l >= available) {
      throw ContractError(std::string(what) + ": layer " + std::to_string(l) + " has no recorded output");
    }
  }
}

Tensor per_layer_mse_sum(const std::vector<Tensor>& a, const std::vector<Tensor>& b,
                         const std::set<std::size_t>& layers, const char* what) {
  check_layer_set(layers, std::min(a.size(), b.size()), what);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l : layers) {
    if (a[l].shape() != b[l].shape()) {
      throw ShapeError(std::string(what) + ": layer " + std::to_string(l) + " shapes " + shape_str(a[l].shape()) +
                       " and " + shape_str(b[l].shape()) + " differ");
    }
    total = add(total, mean_squared_error(a[l], b[l]));
  }
  return total;
}

}  // namespace

Tensor similarity_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                       const std::set<std::size_t>& layers) {
  return per_layer_mse_sum(student, teacher, layers, "similarity_loss");
}

Tensor halting_alignment_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                              const std::set<std::size_t>& layers) {
  return per_layer_mse_sum(student, teacher, layers, "halting_alignment_loss");
}

std::vector<double> halting_prior(std::size_t layers, double center, double sigma) {
  if (layers == 0 || !(sigma > 0)) throw ContractError("halting_prior: need layers > 0 and sigma > 0");
  std::vector<double> p(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    const double z = (static_cast<double>(l) - center) / sigma;
    p[l] = std::exp(-0.5 * z * z);
  }
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= s;
  return p;
}

Tensor halting_distribution(const std::vector<Tensor>& cumulative) {
  if (cumulative.empty()) throw ContractError("halting_distribution: no layers");
  const std::size_t layers = cumulative.size(), rows = cumulative[0].rows();
  // mass = mean_rows(R D) with D the first-difference matrix.
  std::vector<double> diff(layers * layers, 0.0);
  for (std::size_t l = 0; l < layers; ++l) {
    diff[l * layers + l] = 1.0;
    if (l + 1 < layers) diff[l * layers + l + 1] = -1.0;
  }
  const Tensor r = concat_cols(cumulative);
  const Tensor avg({1, rows}, std::vector<double>(rows, 1.0 / static_cast<double>(rows)));
  return normalize(matmul(avg, matmul(r, Tensor({layers, layers}, std::move(diff)))));
}

Tensor kl_divergence(const Tensor& p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl_divergence: distributions differ in length");
  std::vector<double> log_q(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!(q[i] > 0)) throw ContractError("kl_divergence: reference must be strictly positive");
    log_q[i] = std::log(q[i]);
  }
  // Entries with p = 0 contribute 0; the clamp keeps log finite there.
  const Tensor log_p = log(clamp(p, 1e-300, 1.0));
  return sum(mul(p, sub(log_p, Tensor(p.shape(), std::move(log_q)))));
}

Tensor avit_regularizer(const std::vector<Tensor>& cumulative, std::span<const double> prior, double lambda_halt) {
  if (cumulative.empty()) throw ContractError("avit_regularizer: no layers");
  const Tensor ponder = mean(abs(add_scalar(cumulative.back(), -1.0)));
  return add(ponder, scale(kl_divergence(halting_distribution(cumulative), prior), lambda_halt));
}

Tensor stage1_total(const Tensor& sim, const Tensor& halt, const Tensor& cls, const LossWeights& w,
                    LossBreakdown& out) {
  out = {};
  out.sim = sim.item();
  out.halt = halt.item();
  out.cls = cls.item();
  Tensor total = add(add(scale(sim, w.sim), scale(halt, w.mask)), scale(cls, w.cls));
  out.total = total.item();
  return total;
}

Tensor stage2_total(const Tensor& avit, const Tensor& cls, const LossWeights& w, LossBreakdown& out) {
  out = {};
  out.avit = avit.item();
  out.cls = cls.item();
  Tensor total = add(scale(avit, w.avit), scale(cls, w.cls));
  out.total = total.item();
  return total;
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kSupervised: return "supervised";
    case Stage::kDense: return "dense";
    case Stage::kStage1: return "stage1";
    case Stage::kStage2: return "stage2";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : {Stage::kSupervised, Stage::kDense, Stage::kStage1, Stage::kStage2}) {
    if (name == stage_name(s)) return s;
  }
  throw ConfigError("unknown stage '" + name + "' (expected supervised, dense, stage1 or stage2)");
}

TrainablePolicy parse_policy(const std::string& name) {
  if (name == "replaced_only") return TrainablePolicy::kReplacedOnly;
  if (name == "all") return TrainablePolicy::kAll;
  throw ConfigError("unknown trainable policy '" + name + "' (expected replaced_only or all)");
}

std::string metrics_json(const EpochMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["loss_total"] = m.loss.total;
  j["loss_cls"] = m.loss.cls;
  j["loss_sim"] = m.loss.sim;
  j["loss_halt"] = m.loss.halt;
  j["loss_avit"] = m.loss.avit;
  j["val_top1"] = m.val_top1;
  j["retention_per_layer"] = m.retention_per_layer;
  return j.dump();
}

std::vector<NamedTensor> trainable_parameters(const Model& model, TrainablePolicy policy,
                                              const std::set<std::size_t>& replaced) {
  std::vector<NamedTensor> all = model.parameters();
  if (policy == TrainablePolicy::kAll) return all;
  std::vector<NamedTensor> out;
  for (auto& p : all) {
    const bool keep = std::any_of(replaced.begin(), replaced.end(), [&](std::size_t l) {
      return is_mixer_param(p.name, l) || is_halting_param(p.name, l);
    });
    if (keep) out.push_back(std::move(p));
  }
  return out;
}

namespace {

ForwardOptions own_masks(const MaskSpec& spec) {
  ForwardOptions o;
  o.mask_mode = spec.mode;
  o.halt_threshold = spec.threshold;
  o.retention = spec.retention;
  return o;
}

// Forward of `model` with masks produced by `source` (null: no masks). The
// source forward is not recorded.
ForwardResult forward_with_masks(const Model& model, std::span<const double> images, std::size_t batch,
                                 const MaskSpec* spec, const Model* source, bool keep_mixers,
                                 ForwardResult* source_result = nullptr) {
  ForwardOptions opts;
  std::vector<Mask> external;
  if (spec && source && !source->halting.empty()) {
    if (source == &model) {
      opts = own_masks(*spec);
    } else {
      NoGradScope off;
      ForwardOptions so = own_masks(*spec);
      so.keep_mixer_outputs = keep_mixers;
      ForwardResult sr = forward(*source, images, batch, so);
      external = sr.masks;
      if (source_result) *source_result = std::move(sr);
      opts.mask_mode = MaskMode::kExternal;
      opts.external_masks = &external;
    }
  }
  opts.keep_mixer_outputs = keep_mixers;
  return forward(model, images, batch, opts);
}

std::vector<double> prior_for(const Model& m, const TrainConfig& c) {
  const double l = static_cast<double>(m.config.layers);
  return halting_prior(m.config.layers, c.prior_center.value_or(std::max(0.0, l - 2.0)), c.prior_sigma);
}

}  // namespace

Tensor batch_loss(const Model& student, const Model* teacher, const TrainConfig& config,
                  std::span<const double> images, std::span<const int> labels, LossBreakdown& out) {
  const std::size_t batch = labels.size();
  const LossWeights& w = config.weights;
  switch (config.stage) {
    case Stage::kSupervised: {
      const bool halts = !student.halting.empty();
      ForwardResult r = forward(student, images, batch, halts ? own_masks(config.masks) : ForwardOptions{});
      const Tensor cls = cross_entropy(r.logits, labels);
      const Tensor avit =
          halts ? avit_regularizer(r.cumulative, prior_for(student, config), w.halt) : Tensor::scalar(0.0);
      return stage2_total(avit, cls, w, out);
    }
    case Stage::kDense:
    case Stage::kStage1: {
      if (!teacher) throw ContractError(std::string(stage_name(config.stage)) + " needs a teacher");
      const bool masked = config.stage == Stage::kStage1 && !teacher->halting.empty();
      ForwardResult tr;
      if (!masked) {
        NoGradScope off;
        ForwardOptions o;
        o.keep_mixer_outputs = true;
        tr = forward(*teacher, images, batch, o);
      }
      ForwardResult sr =
          forward_with_masks(student, images, batch, masked ? &config.masks : nullptr, teacher, true, &tr);
      const Tensor sim = similarity_loss(sr.mixer_outputs, tr.mixer_outputs, config.replaced);
      const Tensor halt = masked && !student.halting.empty()
                              ? halting_alignment_loss(sr.halting_scores, tr.halting_scores, config.replaced)
                              : Tensor::scalar(0.0);
      return stage1_total(sim, halt, cross_entropy(sr.logits, labels), w, out);
    }
    case Stage::kStage2: {
      if (student.halting.empty()) throw ContractError("stage2 needs a student with halting heads");
      ForwardResult r = forward(student, images, batch, own_masks(config.masks));
      const Tensor avit = avit_regularizer(r.cumulative, prior_for(student, config), w.halt);
      return stage2_total(avit, cross_entropy(r.logits, labels), w, out);
    }
  }
  throw ContractError("batch_loss: unknown stage");
}

EvalResult evaluate(const Model& model, const Dataset& data, const std::optional<MaskSpec>& masks,
                    const Model* mask_source, std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  NoGradScope off;
  const std::size_t t = model.config.tokens(), layers = model.config.layers;
  EvalResult res;
  res.retention_per_layer.assign(layers, 0.0);
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto images = data.gather_images(idx);
    ForwardResult r = forward_with_masks(model, images, n, masks ? &*masks : nullptr,
                                         mask_source ? mask_source : &model, false);
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < model.config.classes; ++k) {
        if (r.logits.at(b, k) > r.logits.at(b, best)) best = k;
      }
      correct += static_cast<int>(best) == data.labels[start + b];
      for (std::size_t l = 0; l < layers; ++l) {
        std::size_t on = 0;
        for (std::size_t i = 1; i < t; ++i) on += r.masks[l][b * t + i];
        res.retention_per_layer[l] += static_cast<double>(on) / static_cast<double>(t - 1);
      }
    }
  }
  res.top1 = static_cast<double>(correct) / static_cast<double>(data.size());
  for (double& v : res.retention_per_layer) v /= static_cast<double>(data.size());
  return res;
}

TrainResult train(Model& student, const Model* teacher, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, std::uint64_t seed,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
  if (train_set.size() == 0) throw ContractError("train: empty training set");
  if (config.batch_size == 0) throw ContractError("train: batch size must be positive");
  if (config.stage != Stage::kSupervised && teacher == nullptr) {
    throw ContractError(std::string("train: stage ") + stage_name(config.stage) + " needs a teacher");
  }
  if (config.stage == Stage::kStage2 && student.halting.empty()) {
    throw ContractError("train: stage2 needs a student with halting heads");
  }
  check_layer_set(config.replaced, student.config.layers, "train");

  // Masks used for validation mirror the training regime.
  std::optional<MaskSpec> eval_masks;
  const Model* eval_source = nullptr;
  if (config.stage == Stage::kStage1) {
    eval_masks = config.masks;
    eval_source = teacher;
  } else if (config.stage == Stage::kStage2 || (config.stage == Stage::kSupervised && !student.halting.empty())) {
    eval_masks = config.masks;
  }

  const auto all = student.parameters();
  std::vector<bool> saved_flags;
  for (const auto& p : all) {
    saved_flags.push_back(p.tensor.requires_grad());
    p.tensor.set_requires_grad(false);
    p.tensor.zero_grad();
  }
  std::vector<Tensor> params;
  for (const auto& p : trainable_parameters(student, config.policy, config.replaced)) {
    p.tensor.set_requires_grad(true);
    params.push_back(p.tensor);
  }
  AdamWConfig oc;
  oc.lr = config.lr_max;
  oc.weight_decay = config.weight_decay;
  AdamW opt(params, oc);

  Rng rng(mix_seed(seed, stream::kTrain));
  const std::size_t n = train_set.size(), bs = config.batch_size;
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const auto total_steps = static_cast<std::int64_t>(std::max<std::size_t>(1, per_epoch * config.epochs));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  auto accumulate = [](LossBreakdown& acc, const LossBreakdown& b, double weight) {
    acc.total += weight * b.total;
    acc.cls += weight * b.cls;
    acc.sim += weight * b.sim;
    acc.halt += weight * b.halt;
    acc.avit += weight * b.avit;
  };

  TrainResult result;
  auto finish_epoch = [&](EpochMetrics m) {
    const EvalResult ev = evaluate(student, val_set.size() ? val_set : train_set, eval_masks, eval_source);
    m.val_top1 = ev.top1;
    m.retention_per_layer = ev.retention_per_layer;
    if (on_epoch) on_epoch(m);
    result.log.push_back(std::move(m));
  };

  {
    EpochMetrics m;
    m.epoch = 0;
    m.lr = config.lr_max;
    NoGradScope off;
    for (std::size_t start = 0; start < n; start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
      LossBreakdown b;
      batch_loss(student, teacher, config, train_set.gather_images(idx), train_set.gather_labels(idx), b);
      accumulate(m.loss, b, static_cast<double>(idx.size()) / static_cast<double>(n));
    }
    finish_epoch(std::move(m));
  }

  std::int64_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min);
    for (std::size_t start = 0; start < n; start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, n - start));
      opt.set_lr(cosine_lr(step, total_steps, config.lr_max, config.lr_min));
      opt.zero_grad();
      LossBreakdown b;
      {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss =
            batch_loss(student, teacher, config, train_set.gather_images(idx), train_set.gather_labels(idx), b);
        backward(loss);
      }
      if (!params.empty()) opt.step();
      accumulate(m.loss, b, static_cast<double>(idx.size()) / static_cast<double>(n));
      ++step;
    }
    finish_epoch(std::move(m));
  }

  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i].tensor.set_requires_grad(saved_flags[i]);
    all[i].tensor.zero_grad();
  }
  return result;
}

}  // namespace seqswap
