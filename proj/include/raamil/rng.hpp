#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace raamil {

/// SplitMix64: used only to expand a 64-bit seed into generator state.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Independent purposes that draw random numbers. Each gets its own stream so
/// that, e.g., changing the dropout rate never perturbs weight init.
enum class Stream : std::uint64_t {
  kSplits = 0x5350'4C49'5453ULL,
  kSynth = 0x5359'4E54'48ULL,
  kInit = 0x494E'4954ULL,
  kDropout = 0x4452'4F50ULL,
  kShuffle = 0x5348'5546ULL,
};

/// xoshiro256** (Blackman & Vigna). Platform independent: every draw is
/// derived from 64-bit integer arithmetic, and the floating helpers below
/// avoid std::*_distribution whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  Rng(std::uint64_t seed, Stream stream, std::uint64_t sub = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Unbiased integer in [0, n) by rejection; n > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one value per call, second discarded).
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::array<std::uint64_t, 4> s_{};
};

}  // namespace raamil
