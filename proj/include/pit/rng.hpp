#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>

#include "pit/tensor.hpp"

// Random streams. Engine is std::mt19937_64, whose output sequence is fixed by
// the C++ standard. Seeds for sub-streams come from derive_seed (SplitMix64
// finalizer) so every component can be reproduced from the global seed alone:
//
//   global seed -> derive_seed(global, component tag) -> derive_seed(., index)
//
// Distributions are implemented here rather than taken from <random>, since
// std:: distributions are not portable across standard libraries.

namespace pit {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t key) {
  return splitmix64(splitmix64(parent) ^ (key * 0xD1B54A32D192ED03ULL + 1));
}

/// Component tags used by the seed hierarchy.
namespace stream {
inline constexpr std::uint64_t init = 1;      // weight initialization
inline constexpr std::uint64_t shuffle = 2;   // mini-batch order
inline constexpr std::uint64_t inputs = 3;    // dataset inputs
inline constexpr std::uint64_t noise = 4;     // dataset target noise
inline constexpr std::uint64_t labels = 5;    // multilabel assignment
inline constexpr std::uint64_t teacher = 6;   // teacher network weights
inline constexpr std::uint64_t sweep = 7;     // per-point sweep seeds
}  // namespace stream

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller, one variate per two uniforms.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw Error("malformed rng state");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace pit
