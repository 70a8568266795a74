#pragma once

#include <string>

#include "pit/autodiff.hpp"
#include "pit/mask.hpp"
#include "pit/network.hpp"

namespace pit {

struct RegularizerConfig {
  double lambda = 0.0;
};

/// Size regularizer on the float gamma-hat of every pit layer:
///   lambda * sum_l C_in*C_out * sum_{i>=1} slice_weight(i) * |g_hat_i|
/// gamma-hat[0] carries zero weight. Leaves are taken from the same tensors
/// the mask path uses, so gradients accumulate into one buffer.
inline Var size_regularizer(Tape& tape, Network& net, const RegularizerConfig& cfg) {
  if (cfg.lambda < 0.0) throw Error("lambda must be >= 0, got " + std::to_string(cfg.lambda));
  auto layers = net.pit_layers();
  if (layers.empty()) throw Error("size_regularizer: network has no pit_conv layer");
  std::optional<Var> total;
  for (PitConvLayer* l : layers) {
    const MaskSpec& spec = l->gamma.spec;
    Tensor coeff({static_cast<std::size_t>(spec.levels)});
    const double channels = static_cast<double>(l->in_channels) * l->out_channels;
    for (int i = 1; i < spec.levels; ++i) {
      coeff[static_cast<std::size_t>(i)] = cfg.lambda * channels * slice_weight(spec, i);
    }
    Var term = sum(mul(tape.constant(coeff), abs(tape.leaf(l->gamma.g_hat))));
    total = total ? add(*total, term) : term;
  }
  return *total;
}

/// Mean-reduced performance loss. bce takes logits.
inline Var performance_loss(const Var& pred, const Var& target, LossKind kind) {
  if (pred.shape() != target.shape()) {
    throw Error("performance_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                shape_str(target.shape()));
  }
  switch (kind) {
    case LossKind::mse: {
      Var diff = sub(pred, target);
      return mean(mul(diff, diff));
    }
    case LossKind::mae: return mean(abs(sub(pred, target)));
    case LossKind::bce: return bce_with_logits(pred, target);
  }
  throw Error("unknown loss kind");
}

/// Pruning-phase objective: performance loss plus size regularizer.
inline Var total_loss(const Var& perf, const Var& reg) {
  if (perf.size() != 1 || reg.size() != 1) throw Error("total_loss expects scalars");
  return add(perf, reg);
}

}  // namespace pit
