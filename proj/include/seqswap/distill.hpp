#pragma once

// Losses and the training loop for teacher training, dense layer-wise
// distillation, teacher-mask distillation (stage 1) and student-mask
// finetuning (stage 2).

#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "seqswap/data.hpp"
#include "seqswap/model.hpp"
#include "seqswap/tensor.hpp"

namespace seqswap {

struct LossWeights {
  double cls = 1.0;
  double sim = 0.75;
  double mask = 0.1;
  double avit = 0.1;
  double halt = 0.01;  // weight of the KL prior inside the halting regularizer
};

// Component values of one batch; total is the weighted sum that was
// differentiated.
struct LossBreakdown {
  double total = 0;
  double cls = 0;
  double sim = 0;
  double halt = 0;
  double avit = 0;
};

// Sum over layers in `layers` of the mean squared difference of the packed
// mixer outputs, i.e. the batch mean of (1 / TD) ||z_S - z_T||^2.
Tensor similarity_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                       const std::set<std::size_t>& layers);

// Sum over layers in `layers` of the batch mean of (1 / T) sum_t (h_S - h_T)^2.
Tensor halting_alignment_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                              const std::set<std::size_t>& layers);

// Discretized Gaussian over layer indices 0..layers-1, normalized.
std::vector<double> halting_prior(std::size_t layers, double center, double sigma);

// Batch-mean halting distribution over layers from the per-layer cumulative
// probabilities: mass_l = mean(R^(l) - R^(l-1)), normalized.
Tensor halting_distribution(const std::vector<Tensor>& cumulative);

// KL(p || q) for a differentiable p and a constant q.
Tensor kl_divergence(const Tensor& p, std::span<const double> q);

// mean |R^(L) - 1| + lambda_halt * KL(p || prior).
Tensor avit_regularizer(const std::vector<Tensor>& cumulative, std::span<const double> prior, double lambda_halt);

// lambda-weighted totals; the returned breakdown carries the component values.
Tensor stage1_total(const Tensor& sim, const Tensor& halt, const Tensor& cls, const LossWeights& w,
                    LossBreakdown& out);
Tensor stage2_total(const Tensor& avit, const Tensor& cls, const LossWeights& w, LossBreakdown& out);

// ---- training ----

enum class Stage {
  kSupervised,  // task loss, plus the halting regularizer when the model halts
  kDense,       // similarity + task loss without masks
  kStage1,      // teacher masks, similarity + halting alignment + task loss
  kStage2,      // student masks, halting regularizer + task loss
};
const char* stage_name(Stage s);
Stage parse_stage(const std::string& name);

enum class TrainablePolicy { kReplacedOnly, kAll };
TrainablePolicy parse_policy(const std::string& name);

// How masks are produced whenever a stage uses them.
struct MaskSpec {
  MaskMode mode = MaskMode::kThreshold;  // kThreshold or kFixedRetention
  double threshold = 1.0;
  double retention = 1.0;
};

struct TrainConfig {
  Stage stage = Stage::kSupervised;
  LossWeights weights;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr_max = 5e-4;
  double lr_min = 0.0;
  double weight_decay = 0.05;
  TrainablePolicy policy = TrainablePolicy::kAll;
  std::set<std::size_t> replaced;
  std::optional<double> prior_center;  // default layers - 2
  double prior_sigma = 1.0;
  MaskSpec masks;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 is the evaluation before any update
  double lr = 0;
  LossBreakdown loss;  // means over the epoch's batches
  double val_top1 = 0;
  std::vector<double> retention_per_layer;
};

std::string metrics_json(const EpochMetrics& m);

struct TrainResult {
  std::vector<EpochMetrics> log;
};

// Differentiable loss of one batch for the configured stage. The teacher
// forward runs without recording.
Tensor batch_loss(const Model& student, const Model* teacher, const TrainConfig& config,
                  std::span<const double> images, std::span<const int> labels, LossBreakdown& out);

// Trains `student` in place. `teacher` is required by every stage except
// kSupervised and is never modified.
TrainResult train(Model& student, const Model* teacher, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& config, std::uint64_t seed,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

// Names of the parameters a policy leaves trainable.
std::vector<NamedTensor> trainable_parameters(const Model& model, TrainablePolicy policy,
                                              const std::set<std::size_t>& replaced);

struct EvalResult {
  double top1 = 0;
  std::vector<double> retention_per_layer;  // mean active patch-token fraction
};

// Top-1 accuracy. With `masks`, the masks come from the halting heads of
// `mask_source` (the model itself when null); a source without halting heads
// yields no masks.
EvalResult evaluate(const Model& model, const Dataset& data, const std::optional<MaskSpec>& masks = std::nullopt,
                    const Model* mask_source = nullptr, std::size_t batch_size = 64);

}  // namespace seqswap
