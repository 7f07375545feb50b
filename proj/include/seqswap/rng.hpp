#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace seqswap {

// Deterministic generator used for every random draw in the library.
// Backed by std::mt19937_64 (fully specified by the standard); the
// real-valued conversions below are implemented here rather than through
// std::*_distribution so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Box-Muller; no cached spare so the stream position is easy to reason about.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// splitmix64 finalizer; derives independent stream seeds from one master seed.
std::uint64_t mix_seed(std::uint64_t master, std::uint64_t stream);

// Named streams fanned out from the master seed.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kData = 2;
inline constexpr std::uint64_t kTrain = 3;
inline constexpr std::uint64_t kReplace = 4;
inline constexpr std::uint64_t kAnalysis = 5;
}  // namespace stream

}  // namespace seqswap
