#include "seqswap/profiling.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "seqswap/error.hpp"
#include "seqswap/rng.hpp"

namespace seqswap {

double token_throughput(std::span<const LayerTiming> layers) {
  double tokens = 0, ms = 0;
  for (const auto& l : layers) {
    tokens += static_cast<double>(l.tokens);
    ms += l.ms;
  }
  if (!(ms > 0)) throw ContractError("token_throughput: total time must be positive");
  return tokens / ms;
}

ProfileReport make_report(std::vector<LayerTiming> layers, double t_fix) {
  ProfileReport r;
  r.layers = std::move(layers);
  r.throughput = token_throughput(r.layers);
  for (const auto& l : r.layers) r.t_mix += l.ms;
  r.t_fix = t_fix;
  r.t_model = r.t_fix + r.t_mix;
  return r;
}

double estimate_model_speedup(const ProfileReport& baseline, const ProfileReport& method, double t_fix) {
  const double num = t_fix + baseline.t_mix, den = t_fix + method.t_mix;
  if (!(num > 0) || !(den > 0)) throw ContractError("estimate_model_speedup: nonpositive runtime");
  return num / den;
}

std::vector<std::size_t> retention_to_token_counts(std::span<const double> ratios, std::size_t tokens) {
  if (tokens == 0) throw ContractError("retention_to_token_counts: no tokens");
  std::vector<std::size_t> out;
  for (double r : ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw ContractError("retention_to_token_counts: ratio outside (0, 1]");
    out.push_back(1 + static_cast<std::size_t>(std::lround(r * static_cast<double>(tokens - 1))));
  }
  return out;
}

double median_ms(const std::function<void()>& fn, std::size_t repeats, std::size_t warmup) {
  if (repeats < 3) throw ContractError("median_ms: need at least three repeats");
  if (warmup < 1) throw ContractError("median_ms: need at least one warmup run");
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> times;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    times.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t n = times.size();
  const double med = n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  // Clock granularity can report zero for tiny calls.
  return std::max(med, 1e-6);
}

ProfileReport measure_token_throughput(const Model& model, std::span<const std::size_t> token_counts,
                                       const TimingOptions& options, std::uint64_t seed) {
  const ModelConfig& c = model.config;
  if (token_counts.size() != c.layers) throw ShapeError("measure_token_throughput: one token count per layer");
  if (options.batch == 0) throw ContractError("measure_token_throughput: batch must be positive");
  NoGradScope off;
  Rng rng(seed);
  std::vector<LayerTiming> timings;
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::size_t n = token_counts[l];
    if (n == 0) throw ContractError("measure_token_throughput: layer with no tokens");
    std::vector<double> v(options.batch * n * c.dim);
    for (double& x : v) x = rng.normal(0.0, 1.0);
    const Tensor u({options.batch * n, c.dim}, std::move(v));
    const Segments segs = Segments::uniform(options.batch, n);
    const double ms = median_ms(
        [&] {
          const MixerTrace tr = apply_mixer(model, l, u, segs);
          if (!model.halting.empty()) (void)halting_scores(u, model.halting[l]);
          (void)tr;
        },
        options.repeats, options.warmup);
    timings.push_back({l, options.batch * n, ms});
  }
  return make_report(std::move(timings), 0.0);
}

double measure_fixed_cost(const Model& model, const TimingOptions& options, std::uint64_t seed) {
  Model bare = model.clone();
  bare.halting.clear();
  bare.config.halting = false;
  Rng rng(seed);
  std::vector<double> images(options.batch * bare.config.image_size());
  for (double& x : images) x = rng.uniform();
  ForwardOptions fo;
  fo.stub_mixers = true;
  NoGradScope off;
  return median_ms([&] { (void)forward(bare, images, options.batch, fo); }, options.repeats, options.warmup);
}

std::string format_speedup(double speedup) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f×", speedup);
  return buf;
}

std::string report_json(const ProfileReport& report) {
  nlohmann::json j;
  j["throughput_tokens_per_ms"] = report.throughput;
  j["t_mix_ms"] = report.t_mix;
  j["t_fix_ms"] = report.t_fix;
  j["t_model_ms"] = report.t_model;
  j["speedup"] = report.speedup;
  for (const auto& l : report.layers) j["layers"].push_back({{"layer", l.layer}, {"tokens", l.tokens}, {"ms", l.ms}});
  return j.dump(2);
}

}  // namespace seqswap
