#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pit/autodiff.hpp"
#include "pit/loss.hpp"
#include "pit/network.hpp"
#include "pit/rng.hpp"

// Central finite-difference checks of the reverse-mode gradients. The tape
// runs with the straight-through surrogate on in both passes, so the
// binarization is differentiable where it is checked.

namespace pit {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-6;  // denominator floor for near-zero gradients
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::fabs(analytic - numeric) /
         std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

/// `loss` builds a scalar from the given parameter tensors on a fresh tape.
inline GradCheckResult gradient_check(const std::string& name,
                                      const std::function<Var(Tape&)>& loss,
                                      const std::vector<Tensor*>& params,
                                      const GradCheckOptions& opt = {}) {
  for (Tensor* p : params) p->set_requires_grad(true);
  {
    Tape tape;
    tape.ste_surrogate = true;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    Tape tape;
    tape.ste_surrogate = true;
    tape.no_grad = true;
    return loss(tape).item();
  };
  GradCheckResult r{name};
  for (Tensor* p : params) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double saved = (*p)[i];
      (*p)[i] = saved + opt.step;
      const double up = eval();
      (*p)[i] = saved - opt.step;
      const double down = eval();
      (*p)[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      r.max_rel_error =
          std::max(r.max_rel_error, relative_error(p->grad()[i], numeric, opt.floor));
      ++r.checked;
    }
  }
  r.passed = r.max_rel_error <= opt.tolerance;
  return r;
}

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero so kinks of abs/relu are not straddled.
inline Tensor away_from_zero(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    v = rng.uniform(0.2, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  }
  return t;
}

/// Projects an arbitrary output to a scalar with fixed random weights.
inline Var project(Tape& tape, const Var& y, const Tensor& weights) {
  return sum(mul(y, tape.constant(weights)));
}

}  // namespace detail

/// Every differentiable op plus the pruning-phase objective of a small
/// network with respect to its weights and gamma-hat.
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 1,
                                                       const GradCheckOptions& opt = {}) {
  using detail::away_from_zero;
  using detail::project;
  using detail::random_tensor;
  Rng rng(seed);
  std::vector<GradCheckResult> out;

  auto unary = [&](const std::string& name, Tensor a, Shape out_shape,
                   const std::function<Var(const Var&)>& op) {
    Tensor proj = random_tensor(rng, std::move(out_shape));
    out.push_back(gradient_check(
        name, [&](Tape& t) { return project(t, op(t.leaf(a)), proj); }, {&a}, opt));
  };
  auto binary = [&](const std::string& name, Tensor a, Tensor b, Shape out_shape,
                    const std::function<Var(const Var&, const Var&)>& op) {
    Tensor proj = random_tensor(rng, std::move(out_shape));
    out.push_back(gradient_check(
        name, [&](Tape& t) { return project(t, op(t.leaf(a), t.leaf(b)), proj); }, {&a, &b},
        opt));
  };

  binary("add", random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), {3, 4},
         [](const Var& a, const Var& b) { return add(a, b); });
  binary("sub", random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), {3, 4},
         [](const Var& a, const Var& b) { return sub(a, b); });
  binary("mul", random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), {3, 4},
         [](const Var& a, const Var& b) { return mul(a, b); });
  unary("scale", random_tensor(rng, {5}), {5}, [](const Var& a) { return scale(a, -1.7); });
  unary("abs", away_from_zero(rng, {6}), {6}, [](const Var& a) { return abs(a); });
  unary("relu", away_from_zero(rng, {6}), {6}, [](const Var& a) { return relu(a); });
  unary("reshape", random_tensor(rng, {2, 6}), {3, 4},
        [](const Var& a) { return reshape(a, {3, 4}); });
  unary("sum", random_tensor(rng, {2, 3}), {}, [](const Var& a) { return sum(a); });
  unary("mean", random_tensor(rng, {2, 3}), {}, [](const Var& a) { return mean(a); });
  binary("matmul", random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2}), {3, 2},
         [](const Var& a, const Var& b) { return matmul(a, b); });
  unary("column_product", random_tensor(rng, {4, 5}), {5},
        [](const Var& a) { return column_product(a); });
  unary("column_product_zero", Tensor({3, 2}, {0.0, 0.5, 0.7, 0.0, -1.2, 0.0}), {2},
        [](const Var& a) { return column_product(a); });
  {
    Tensor x = random_tensor(rng, {2, 3, 10}), w = random_tensor(rng, {4, 3, 3}),
           b = random_tensor(rng, {4}), proj = random_tensor(rng, {2, 4, 10});
    out.push_back(gradient_check(
        "conv1d_causal",
        [&](Tape& t) { return project(t, conv1d_causal(t.leaf(x), t.leaf(w), t.leaf(b), 2), proj); },
        {&x, &w, &b}, opt));
  }
  {
    Tensor x = random_tensor(rng, {2, 9}), w = random_tensor(rng, {3, 2, 5}),
           proj = random_tensor(rng, {3, 9});
    out.push_back(gradient_check(
        "conv1d_causal_unbatched",
        [&](Tape& t) {
          return project(t, conv1d_causal(t.leaf(x), t.leaf(w), std::nullopt, 1), proj);
        },
        {&x, &w}, opt));
  }
  binary("mask_taps", random_tensor(rng, {2, 3, 5}), random_tensor(rng, {5}), {2, 3, 5},
         [](const Var& w, const Var& m) { return mask_taps(w, m); });
  unary("avg_pool_time", random_tensor(rng, {2, 3, 8}), {2, 3, 2},
        [](const Var& a) { return avg_pool_time(a, 4); });
  unary("avg_pool_global", random_tensor(rng, {2, 3, 8}), {2, 3},
        [](const Var& a) { return avg_pool_time(a, 0); });
  {
    Tensor x = random_tensor(rng, {4, 3}), w = random_tensor(rng, {2, 3}),
           b = random_tensor(rng, {2}), proj = random_tensor(rng, {4, 2});
    out.push_back(gradient_check(
        "linear", [&](Tape& t) { return project(t, linear(t.leaf(x), t.leaf(w), t.leaf(b)), proj); },
        {&x, &w, &b}, opt));
  }
  unary("heaviside_ste", random_tensor(rng, {4}, 0.0, 1.0), {4},
        [](const Var& a) { return heaviside_ste(a, 0.5); });
  {
    Tensor z = random_tensor(rng, {3, 4}, -3.0, 3.0);
    Tensor y({3, 4});
    for (double& v : y.values()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    out.push_back(gradient_check(
        "bce_with_logits", [&](Tape& t) { return bce_with_logits(t.leaf(z), t.constant(y)); },
        {&z}, opt));
  }
  {
    Tensor a = random_tensor(rng, {2, 5}), b = random_tensor(rng, {2, 5});
    out.push_back(gradient_check(
        "mse",
        [&](Tape& t) { return performance_loss(t.leaf(a), t.constant(b), LossKind::mse); },
        {&a}, opt));
    Tensor c = random_tensor(rng, {2, 5});
    for (std::size_t i = 0; i < c.size(); ++i) {
      c[i] = b[i] + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
    }
    out.push_back(gradient_check(
        "mae",
        [&](Tape& t) { return performance_loss(t.leaf(c), t.constant(b), LossKind::mae); },
        {&c}, opt));
  }
  {
    // Mask transform on its own, then the whole pruning objective.
    GammaSet g = GammaSet::make(17);
    for (double& v : g.g_hat.values()) v = rng.uniform(0.2, 0.95);
    Tensor proj = random_tensor(rng, {17});
    out.push_back(gradient_check(
        "mask_transform",
        [&](Tape& t) {
          return project(t, build_mask(t, heaviside_ste(t.leaf(g.g_hat), g.delta), g.mats), proj);
        },
        {&g.g_hat}, opt));
  }
  {
    NetworkConfig cfg;
    cfg.input_channels = 2;
    cfg.task = Task::regression;
    cfg.loss = LossKind::mse;
    LayerSpec l0;
    l0.kind = LayerKind::pit_conv;
    l0.in_channels = 2;
    l0.out_channels = 3;
    l0.rf_max = 9;
    l0.activation = ActivationKind::relu;
    LayerSpec l1 = l0;
    l1.in_channels = 3;
    l1.out_channels = 1;
    l1.rf_max = 5;
    l1.activation = ActivationKind::none;
    cfg.layers = {l0, l1};
    Network net = Network::build(cfg, seed);
    for (auto* l : net.pit_layers()) {
      for (double& v : l->gamma.g_hat.values()) v = rng.uniform(0.2, 0.95);
      l->gamma.g_hat[0] = 1.0;
    }
    Tensor x = random_tensor(rng, {3, 2, 12}), y = random_tensor(rng, {3, 1, 12});
    std::vector<Tensor*> params;
    for (const ParamRef& p : net.parameters()) params.push_back(p.tensor);
    out.push_back(gradient_check(
        "pruning_objective",
        [&](Tape& t) {
          Var perf = performance_loss(net.forward(t, t.constant(x), true), t.constant(y),
                                      LossKind::mse);
          return total_loss(perf, size_regularizer(t, net, {1e-3}));
        },
        params, opt));
  }
  return out;
}

}  // namespace pit
