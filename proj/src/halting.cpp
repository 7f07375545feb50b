#include "seqswap/halting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "seqswap/error.hpp"

namespace seqswap {

double halting_score(std::span<const double> token, double gamma, double beta) {
  if (token.empty()) throw ShapeError("halting_score: empty token");
  const double z = gamma * token[0] + beta;
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

Tensor halting_scores(const Tensor& x, const HaltingParams& p) {
  return sigmoid(affine_scalar(slice_cols(x, 0, 1), p.gamma, p.beta));
}

double update_cumulative(double r_prev, double h) {
  if (!(r_prev >= 0.0 && r_prev <= 1.0) || !(h >= 0.0 && h <= 1.0)) {
    throw ContractError("update_cumulative: inputs must lie in [0, 1]");
  }
  return std::clamp(r_prev + (1.0 - r_prev) * h, 0.0, 1.0);
}

Tensor update_cumulative(const Tensor& r_prev, const Tensor& h) {
  // R + (1 - R) h = R + h - R h
  return clamp(add(r_prev, sub(h, mul(r_prev, h))), 0.0, 1.0);
}

Mask retention_mask(std::span<const double> cumulative, double threshold) {
  return threshold_masks(cumulative, cumulative.size(), threshold, nullptr);
}

Mask threshold_masks(std::span<const double> cumulative, std::size_t seq_len, double threshold,
                     const Mask* previous) {
  if (seq_len == 0 || cumulative.size() % seq_len != 0) {
    throw ShapeError("threshold_masks: rows are not a whole number of sequences");
  }
  Mask m(cumulative.size());
  for (std::size_t r = 0; r < m.size(); ++r) {
    const bool cls = r % seq_len == 0;
    bool on = cls || cumulative[r] < threshold;
    if (previous && !(*previous)[r]) on = cls;
    m[r] = on ? 1 : 0;
  }
  return m;
}

std::size_t retained_count(double ratio, std::size_t seq_len) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("retention ratio must lie in (0, 1]");
  const double want = std::ceil(ratio * static_cast<double>(seq_len - 1) - 1e-9);
  return std::min<std::size_t>(static_cast<std::size_t>(want), seq_len - 1);
}

Mask fixed_retention_masks(std::span<const double> cumulative, std::size_t seq_len, double ratio,
                           const Mask* previous) {
  if (seq_len == 0 || cumulative.size() % seq_len != 0) {
    throw ShapeError("fixed_retention_masks: rows are not a whole number of sequences");
  }
  const std::size_t keep = retained_count(ratio, seq_len);
  Mask m(cumulative.size(), 0);
  std::vector<std::size_t> cand;
  for (std::size_t base = 0; base < cumulative.size(); base += seq_len) {
    m[base] = 1;
    cand.clear();
    for (std::size_t t = 1; t < seq_len; ++t) {
      if (!previous || (*previous)[base + t]) cand.push_back(t);
    }
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      return cumulative[base + a] < cumulative[base + b];
    });
    for (std::size_t i = 0; i < std::min(keep, cand.size()); ++i) m[base + cand[i]] = 1;
  }
  return m;
}

bool all_active(const Mask& mask) {
  return std::all_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; });
}

TokenIndex active_index(const Mask& mask, std::size_t seq_len) {
  if (seq_len == 0 || mask.size() % seq_len != 0) {
    throw ShapeError("active_index: mask is not a whole number of sequences");
  }
  TokenIndex idx;
  idx.total_rows = mask.size();
  for (std::size_t base = 0; base < mask.size(); base += seq_len) {
    for (std::size_t t = 0; t < seq_len; ++t) {
      if (mask[base + t]) idx.rows.push_back(base + t);
    }
    idx.segments.offsets.push_back(idx.rows.size());
  }
  return idx;
}

Tensor compress_tokens(const Tensor& x, const TokenIndex& index) {
  if (x.rows() != index.total_rows) {
    throw ContractError("compress_tokens: index map built for " + std::to_string(index.total_rows) +
                        " rows, tensor has " + std::to_string(x.rows()));
  }
  return gather_rows(x, index.rows);
}

Tensor restore_tokens(const Tensor& z, const TokenIndex& index, std::size_t rows) {
  if (rows != index.total_rows || z.rows() != index.rows.size()) {
    throw ContractError("restore_tokens: index map inconsistent with the requested token count");
  }
  return scatter_rows(z, index.rows, rows);
}

}  // namespace seqswap
