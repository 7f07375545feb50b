#pragma once

// Experiment commands. Each reads its inputs from and writes its artifacts
// under one output directory:
//   checkpoints/*.ckpt  logs/*.jsonl  reports/*.csv|json
//   maps/  importance/  retention.csv  auprc.json   (analyze)

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "seqswap/config.hpp"
#include "seqswap/profiling.hpp"

namespace seqswap {

struct Workspace {
  ExperimentConfig config;
  std::filesystem::path root;
  std::function<void(const std::string&)> progress;  // optional status lines

  std::filesystem::path checkpoint(const std::string& name) const { return root / "checkpoints" / (name + ".ckpt"); }
  std::filesystem::path log(const std::string& name) const { return root / "logs" / (name + ".jsonl"); }
  std::filesystem::path report(const std::string& file) const { return root / "reports" / file; }
  void say(const std::string& line) const {
    if (progress) progress(line);
  }
};

struct Splits {
  Dataset train;
  Dataset val;
};

Splits load_splits(const ExperimentConfig& config);

// Loads a named checkpoint; a missing file is a dependency error.
Model require_checkpoint(const Workspace& ws, const std::string& name);

TrainResult train_teacher(const Workspace& ws);
Model build_student(const Workspace& ws);
TrainResult distill_student(const Workspace& ws);

struct AblationRow {
  std::string label;  // none, a group such as 2 or 0-1, or full
  std::set<std::size_t> layers;
  std::vector<double> top1;     // one per configured kind
  std::vector<double> sim_start;
  std::vector<double> sim_end;
};
std::vector<AblationRow> ablate_groups(const Workspace& ws);

struct SweepRow {
  double retention = 1.0;
  double teacher_top1 = 0;
  double student_top1 = 0;
  double gap() const { return teacher_top1 - student_top1; }
};
std::vector<SweepRow> sweep_retention(const Workspace& ws);

struct LayerAuprc {
  std::size_t layer = 0;
  double auprc = 0;
  double random = 0;
  std::size_t samples = 0;
};
std::vector<LayerAuprc> analyze(const Workspace& ws);

struct ProfileEntry {
  std::string model;
  std::size_t image = 0;
  ProfileReport report;
};
std::vector<ProfileEntry> profile(const Workspace& ws);

void report(const Workspace& ws);

const std::vector<std::string>& command_names();
void run_command(const std::string& command, const Workspace& ws);

// Per-epoch metrics as JSON lines.
std::string log_lines(const TrainResult& r);

}  // namespace seqswap
