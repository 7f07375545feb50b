#pragma once

// Experiment configuration. Files are JSON objects with a "version" field;
// every section is optional and unknown keys are rejected.

#include <json.hpp>

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "seqswap/data.hpp"
#include "seqswap/distill.hpp"
#include "seqswap/model.hpp"

namespace seqswap {

inline constexpr int kConfigVersion = 1;

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx
  SyntheticSpec synthetic{2000, 500, 28, 7, 10, 0.6};
  std::string train_images, train_labels, val_images, val_labels;
  std::size_t train_limit = 0;  // 0 keeps every sample
  std::size_t val_limit = 0;
};

struct StageConfig {
  Stage stage = Stage::kSupervised;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  double lr_min = 0.0;
  double weight_decay = 0.05;
  TrainablePolicy policy = TrainablePolicy::kAll;
  LossWeights weights;
  MaskSpec masks;
  std::string init;  // checkpoint the run starts from, by name
};

struct ReplaceConfig {
  std::set<std::size_t> layers{3};
  MixerKind kind = MixerKind::kSeqLstm;
};

struct AblationConfig {
  std::vector<MixerKind> kinds{MixerKind::kSeqLstm, MixerKind::kSeqSsm};
  std::vector<std::set<std::size_t>> groups;  // empty: each single layer
  bool include_none = true;
  bool include_full = true;
  StageConfig train;  // equal budget for every group
};

struct SweepConfig {
  std::vector<double> retentions{1.0, 0.8, 0.6};
  std::set<std::size_t> layers{3};
  MixerKind kind = MixerKind::kSeqLstm;
  StageConfig train;
};

struct AnalysisConfig {
  std::string checkpoint = "teacher";
  std::size_t samples = 32;
  std::optional<MaskSpec> masks;
  std::size_t random_trials = 100;
};

struct ProfileConfig {
  std::vector<std::size_t> images{28, 56};  // one throughput column per scale
  std::vector<std::string> checkpoints{"teacher", "student_stage1"};
  std::string baseline = "teacher";
  std::optional<double> retention;  // fixed ratio; measured profile when absent
  std::size_t repeats = 5;
  std::size_t warmup = 2;
  std::size_t batch = 1;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  ModelConfig model;
  DataConfig data;
  StageConfig teacher;
  ReplaceConfig replace;
  StageConfig distill;
  AblationConfig ablation;
  SweepConfig sweep;
  AnalysisConfig analysis;
  ProfileConfig profile;

  ExperimentConfig();
};

ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
nlohmann::json to_json(const ExperimentConfig& c);

nlohmann::json model_config_json(const ModelConfig& c);
ModelConfig parse_model_config(const nlohmann::json& j);

TrainConfig train_config(const StageConfig& s, const std::set<std::size_t>& replaced);

}  // namespace seqswap
