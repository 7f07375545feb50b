#pragma once

// Wall-clock token-mixing throughput and the model-level speedup estimate
// built from it.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "seqswap/model.hpp"

namespace seqswap {

struct LayerTiming {
  std::size_t layer = 0;
  std::size_t tokens = 0;  // tokens processed per timed call
  double ms = 0;           // median runtime
};

struct ProfileReport {
  std::vector<LayerTiming> layers;
  double throughput = 0;  // tokens / ms
  double t_mix = 0;
  double t_fix = 0;
  double t_model = 0;
  double speedup = 1.0;
};

// sum T_l / sum t_l.
double token_throughput(std::span<const LayerTiming> layers);

// Fills throughput, t_mix and t_model from the layer timings.
ProfileReport make_report(std::vector<LayerTiming> layers, double t_fix);

// (t_fix + t_mix of the baseline) / (t_fix + t_mix of the method).
double estimate_model_speedup(const ProfileReport& baseline, const ProfileReport& method, double t_fix);

// T_l = 1 + round(ratio_l (T - 1)).
std::vector<std::size_t> retention_to_token_counts(std::span<const double> ratios, std::size_t tokens);

struct TimingOptions {
  std::size_t repeats = 5;
  std::size_t warmup = 2;
  std::size_t batch = 1;
};

// Median of `repeats` timed calls after `warmup` untimed ones, in ms.
double median_ms(const std::function<void()>& fn, std::size_t repeats, std::size_t warmup);

// Times each token mixer (plus its halting head) in isolation on random
// inputs of token_counts[l] tokens per sample. t_fix is left at zero.
ProfileReport measure_token_throughput(const Model& model, std::span<const std::size_t> token_counts,
                                       const TimingOptions& options, std::uint64_t seed);

// Runtime of the full model with identity token mixers and no halting heads.
double measure_fixed_cost(const Model& model, const TimingOptions& options, std::uint64_t seed);

std::string format_speedup(double speedup);
std::string report_json(const ProfileReport& report);

}  // namespace seqswap
