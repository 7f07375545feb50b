#pragma once

#include <cstdint>
#include <vector>

#include "seqswap/tensor.hpp"

namespace seqswap {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Per-parameter moments plus the shared step counter.
struct OptState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  // One update from the gradients currently stored on the parameters.
  // Parameters without a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  void set_lr(double lr) { config_.lr = lr; }
  const AdamWConfig& config() const { return config_; }
  const OptState& state() const { return state_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig config_;
  OptState state_;
};

// Functional form over explicit gradient buffers.
void adamw_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                OptState& state, const AdamWConfig& config);

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2, for 0 <= step <= total.
double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min);

}  // namespace seqswap
