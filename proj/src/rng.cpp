#include "seqswap/rng.hpp"

#include <cmath>
#include <numbers>

#include "seqswap/error.hpp"

namespace seqswap {

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ContractError("Rng::below: empty range");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal(double mean, double stddev) {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

const char* category_name(ErrorCategory c) noexcept {
  switch (c) {
    case ErrorCategory::kShape: return "shape";
    case ErrorCategory::kContract: return "contract";
    case ErrorCategory::kFormat: return "format";
    case ErrorCategory::kDependency: return "dependency";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kConfig: return "config";
  }
  return "unknown";
}

}  // namespace seqswap
