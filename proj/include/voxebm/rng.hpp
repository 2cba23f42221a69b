#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace voxebm {

// Deterministic random source. All distributions are derived from the raw
// mt19937_64 output stream by hand, because the std::*_distribution adaptors
// are implementation-defined and would break golden reproducibility across
// toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // 53-bit uniform in [0, 1).
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_int(std::uint64_t n);

  bool bernoulli(double p) { return uniform01() < p; }

  // Box-Muller; second value cached.
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Stable per-stage seed derivation: FNV-1a over the tag and index, mixed
// with the master seed through a splitmix64 finalizer.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                          std::uint64_t index = 0);

}  // namespace voxebm
