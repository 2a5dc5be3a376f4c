#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace twinquant {

// Deterministic random source. All randomness in the project flows through
// this class so that artifacts are reproducible bit-for-bit from a seed.
// Gaussian draws use Box-Muller on explicit 53-bit uniforms instead of
// std::normal_distribution, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection sampling keeps the distribution exact for any n.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = gen_();
    while (v >= limit) v = gen_();
    return v % n;
  }

  // Standard normal draw.
  double gaussian();

  // Derive an independent stream seed (splitmix64 of seed ^ stream tag).
  static std::uint64_t fork_seed(std::uint64_t seed, std::uint64_t stream);

  void shuffle(std::vector<std::size_t>& v);

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace twinquant
