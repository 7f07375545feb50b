#include "seqswap/optim.hpp"

#include <cmath>
#include <numbers>

#include "seqswap/error.hpp"

namespace seqswap {

void adamw_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                OptState& state, const AdamWConfig& config) {
  if (grads.size() != params.size()) throw ShapeError("adamw_step: one gradient per parameter required");
  if (state.m.empty()) {
    for (const Tensor& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: state belongs to other parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.m[i].size() != params[i].size()) {
      throw ShapeError("adamw_step: gradient shape differs from parameter " + std::to_string(i));
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      theta[j] *= decay;
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  for (const Tensor& p : params_) {
    state_.m.emplace_back(p.size(), 0.0);
    state_.v.emplace_back(p.size(), 0.0);
  }
}

void AdamW::step() {
  std::vector<std::vector<double>> grads;
  grads.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(p.size(), 0.0);
    }
  }
  adamw_step(params_, grads, state_, config_);
}

void AdamW::zero_grad() {
  for (const Tensor& p : params_) p.zero_grad();
}

double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min) {
  if (total < 1 || step < 0 || step > total) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total) + "]");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace seqswap
