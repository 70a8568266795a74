#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pit/tensor.hpp"

namespace pit {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-tensor moment buffers. `steps` counts updates of this tensor only, so
/// bias correction starts fresh for parameters that join training late.
struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t steps = 0;
};

/// One adaptive-moment update. Gamma tensors are clamped to [0, 1] afterwards
/// and their first entry restored to 1.
inline void optimizer_step(Tensor& param, std::span<const double> grad, AdamSlot& slot,
                           const AdamConfig& cfg, bool is_gamma = false) {
  if (grad.size() != param.size()) {
    throw Error("optimizer_step: gradient has " + std::to_string(grad.size()) +
                " entries for a parameter of " + std::to_string(param.size()));
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw NonFiniteError("optimizer_step: non-finite gradient");
  }
  if (slot.m.empty()) {
    slot.m.assign(param.size(), 0.0);
    slot.v.assign(param.size(), 0.0);
  } else if (slot.m.size() != param.size() || slot.v.size() != param.size()) {
    throw Error("optimizer_step: moment buffers do not match the parameter");
  }
  ++slot.steps;
  const double t = static_cast<double>(slot.steps);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto p = param.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grad[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = slot.m[i] / c1;
    const double v_hat = slot.v[i] / c2;
    p[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
  }
  if (is_gamma) {
    for (double& x : p) x = std::clamp(x, 0.0, 1.0);
    if (!p.empty()) p[0] = 1.0;
  }
}

}  // namespace pit
