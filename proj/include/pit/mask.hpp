#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pit/autodiff.hpp"
#include "pit/tensor.hpp"

// Dilation masks. A layer with maximum receptive field rf_max carries
// L = floor(log2(rf_max - 1)) + 1 gamma switches. gamma[0] is pinned to 1.
// Level products Gamma[i] = gamma[0] * ... * gamma[L-1-i] gate the taps whose
// position p has capped 2-adic valuation min(v2(p), L-1) == i (v2(0) := L-1).
// Every reachable mask keeps exactly the multiples of one power-of-two d.

namespace pit {

using Bits = std::vector<int>;

inline int compute_levels(int rf_max) {
  if (rf_max < 2) {
    throw Error("rf_max must be >= 2, got " + std::to_string(rf_max));
  }
  return std::bit_width(static_cast<unsigned>(rf_max - 1));
}

struct MaskSpec {
  int rf_max = 2;
  int levels = 1;

  static MaskSpec make(int rf_max) { return {rf_max, compute_levels(rf_max)}; }

  int max_dilation() const { return 1 << (levels - 1); }

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

/// Capped 2-adic valuation of a tap position; position 0 belongs to the top level.
inline int tap_level(int position, int levels) {
  if (position == 0) return levels - 1;
  return std::min(std::countr_zero(static_cast<unsigned>(position)), levels - 1);
}

inline void require_pinned(std::span<const int> gamma) {
  if (gamma.empty() || gamma[0] != 1) throw Error("gamma[0] must be 1");
}

/// Gamma[i] = prod_{k=0}^{L-1-i} gamma[k].
inline Bits gamma_products(std::span<const int> gamma) {
  require_pinned(gamma);
  const std::size_t levels = gamma.size();
  Bits out(levels);
  for (std::size_t i = 0; i < levels; ++i) {
    int p = 1;
    for (std::size_t k = 0; k + i < levels; ++k) p *= gamma[k];
    out[i] = p;
  }
  return out;
}

struct ConstantMatrices {
  Tensor selector;     // T: [L x L], 1 iff row + col <= L-1
  Tensor complement;   // 1 - T
  Tensor level_of_tap; // K: [L x rf_max], one-hot column per tap
  Tensor ones_row;     // [1 x L]
};

inline ConstantMatrices build_constant_matrices(const MaskSpec& spec) {
  const auto levels = static_cast<std::size_t>(spec.levels);
  const auto rf = static_cast<std::size_t>(spec.rf_max);
  ConstantMatrices m{Tensor({levels, levels}), Tensor({levels, levels}), Tensor({levels, rf}),
                     Tensor({1, levels}, 1.0)};
  for (std::size_t j = 0; j < levels; ++j)
    for (std::size_t c = 0; c < levels; ++c) {
      const double on = j + c <= levels - 1 ? 1.0 : 0.0;
      m.selector[j * levels + c] = on;
      m.complement[j * levels + c] = 1.0 - on;
    }
  for (std::size_t p = 0; p < rf; ++p) {
    const auto row = static_cast<std::size_t>(tap_level(static_cast<int>(p), spec.levels));
    m.level_of_tap[row * rf + p] = 1.0;
  }
  return m;
}

/// Differentiable mask M = colprod{ [(gamma . 1_{1xL}) (.) T + (1 - T)] . K }.
/// `gamma` is the binarized (or surrogate) length-L vector.
inline Var build_mask(Tape& tape, const Var& gamma, const ConstantMatrices& mats) {
  const std::size_t levels = mats.selector.dim(0);
  if (gamma.shape() != Shape{levels}) {
    throw Error("build_mask: gamma shape " + shape_str(gamma.shape()) + " vs " +
                std::to_string(levels) + " levels");
  }
  Var column = reshape(gamma, {levels, 1});
  Var spread = matmul(column, tape.constant(mats.ones_row));
  Var gated = add(mul(spread, tape.constant(mats.selector)), tape.constant(mats.complement));
  return column_product(matmul(gated, tape.constant(mats.level_of_tap)));
}

/// Evaluates build_mask on a binary gamma without keeping a graph.
inline Tensor mask_values(std::span<const int> gamma, const ConstantMatrices& mats) {
  require_pinned(gamma);
  Tape tape;
  Tensor g({gamma.size()});
  for (std::size_t i = 0; i < gamma.size(); ++i) g[i] = gamma[i];
  return build_mask(tape, tape.constant(g), mats).to_tensor();
}

/// Reference construction: find the finest live level i (Gamma[i] == 1),
/// then keep every position that is a multiple of 2^i.
inline Bits mask_oracle(std::span<const int> gamma, int rf_max) {
  require_pinned(gamma);
  if (static_cast<int>(gamma.size()) != compute_levels(rf_max)) {
    throw Error("mask_oracle: gamma length does not match rf_max");
  }
  const Bits level_on = gamma_products(gamma);
  std::size_t finest = 0;
  while (level_on[finest] == 0) ++finest;  // level L-1 is always on
  const int step = 1 << finest;
  Bits mask(static_cast<std::size_t>(rf_max), 0);
  for (int p = 0; p < rf_max; p += step) mask[static_cast<std::size_t>(p)] = 1;
  return mask;
}

struct Dilation {
  int dilation = 1;
  int taps = 1;  // floor((rf_max - 1) / d) + 1

  /// Largest alive tap offset, in time-steps.
  int span() const { return (taps - 1) * dilation; }
};

/// Entries of gamma after the first zero are ignored.
inline Dilation extract_dilation(std::span<const int> gamma, int rf_max) {
  require_pinned(gamma);
  const int levels = static_cast<int>(gamma.size());
  int prefix = 0;
  while (prefix + 1 < levels && gamma[static_cast<std::size_t>(prefix + 1)] == 1) ++prefix;
  const int d = 1 << (levels - 1 - prefix);
  return {d, (rf_max - 1) / d + 1};
}

/// Canonical gamma encoding a power-of-two dilation.
inline Bits gamma_for_dilation(const MaskSpec& spec, int dilation) {
  if (dilation < 1 || !std::has_single_bit(static_cast<unsigned>(dilation)) ||
      dilation > spec.max_dilation()) {
    throw Error("dilation " + std::to_string(dilation) + " is not a power of two in [1, " +
                std::to_string(spec.max_dilation()) + "] for rf_max " +
                std::to_string(spec.rf_max));
  }
  const int ones = spec.levels - std::countr_zero(static_cast<unsigned>(dilation));
  Bits gamma(static_cast<std::size_t>(spec.levels), 0);
  for (int i = 0; i < ones; ++i) gamma[static_cast<std::size_t>(i)] = 1;
  return gamma;
}

/// Number of taps enabled by gamma[i]: round((rf_max - 1) / 2^(L-i)), halves
/// rounded away from zero.
inline int slice_weight(const MaskSpec& spec, int i) {
  if (i < 1 || i > spec.levels - 1) {
    throw Error("slice_weight: index " + std::to_string(i) + " outside [1, " +
                std::to_string(spec.levels - 1) + "]");
  }
  const long long span = spec.rf_max - 1;
  const long long denom = 1LL << (spec.levels - i);
  return static_cast<int>((2 * span + denom) / (2 * denom));
}

}  // namespace pit
