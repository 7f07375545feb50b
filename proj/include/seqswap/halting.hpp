#pragma once

// Adaptive token halting: per-token halting scores, cumulative halting
// probabilities, binary retention masks and the compress/restore wrapper
// that runs a token mixer on active tokens only.

#include <cstdint>
#include <span>
#include <vector>

#include "seqswap/tensor.hpp"

namespace seqswap {

using Mask = std::vector<std::uint8_t>;

// Per-layer halting head: h = sigmoid(gamma * x[0] + beta).
struct HaltingParams {
  Tensor gamma;  // [1]
  Tensor beta;   // [1]
};

double halting_score(std::span<const double> token, double gamma, double beta);
// Differentiable scores for every row of x, shape [rows x 1].
Tensor halting_scores(const Tensor& x, const HaltingParams& p);

// R + (1 - R) h clamped to [0, 1]; both inputs must lie in [0, 1].
double update_cumulative(double r_prev, double h);
Tensor update_cumulative(const Tensor& r_prev, const Tensor& h);

// m_t = [R_t < threshold] for one sequence whose position 0 is the class
// token; the class token is always active.
Mask retention_mask(std::span<const double> cumulative, double threshold = 1.0);

// Batched form over packed sequences of length seq_len. Tokens inactive in
// previous (when given) stay inactive.
Mask threshold_masks(std::span<const double> cumulative, std::size_t seq_len, double threshold,
                     const Mask* previous);

// Keeps the ceil(ratio * (seq_len - 1)) still-active patch tokens with the
// lowest cumulative halting probability in each sequence (ties: lower index).
Mask fixed_retention_masks(std::span<const double> cumulative, std::size_t seq_len, double ratio,
                           const Mask* previous);

std::size_t retained_count(double ratio, std::size_t seq_len);

// Active rows of a packed batch, in original order, with their sequence layout.
struct TokenIndex {
  std::vector<std::size_t> rows;
  Segments segments;
  std::size_t total_rows = 0;
};

TokenIndex active_index(const Mask& mask, std::size_t seq_len);
bool all_active(const Mask& mask);

Tensor compress_tokens(const Tensor& x, const TokenIndex& index);
// Scatters rows back to their positions; inactive positions are zero.
Tensor restore_tokens(const Tensor& z, const TokenIndex& index, std::size_t rows);

// Per-sample halting record of one forward pass.
struct HaltingState {
  std::vector<std::vector<double>> cumulative;  // per layer, per token
  std::vector<Mask> masks;                      // per layer, per token
  std::vector<std::size_t> active_counts;       // per layer, patch tokens only
};

}  // namespace seqswap
