#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pit/pit.hpp"

namespace pit::test {

/// Hand-rolled generators for the property tests.
struct Gen {
  Rng rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  int integer(int lo, int hi) {  // inclusive
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  double real(double lo = -1.0, double hi = 1.0) { return rng.uniform(lo, hi); }

  bool coin() { return rng.below(2) == 1; }

  Tensor tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = real(lo, hi);
    return t;
  }

  Bits gamma(int levels) {
    Bits g(static_cast<std::size_t>(levels));
    g[0] = 1;
    for (std::size_t i = 1; i < g.size(); ++i) g[i] = coin() ? 1 : 0;
    return g;
  }

  /// Random regression net of pit_conv layers with optional relu between.
  NetworkConfig pit_net(int layers) {
    NetworkConfig cfg;
    cfg.input_channels = integer(1, 3);
    cfg.task = Task::regression;
    cfg.loss = LossKind::mse;
    int channels = cfg.input_channels;
    for (int l = 0; l < layers; ++l) {
      LayerSpec s;
      s.kind = LayerKind::pit_conv;
      s.in_channels = channels;
      s.out_channels = integer(1, 4);
      s.rf_max = integer(2, 17);
      s.bias = coin();
      s.activation = l + 1 < layers && coin() ? ActivationKind::relu : ActivationKind::none;
      channels = s.out_channels;
      cfg.layers.push_back(s);
    }
    return cfg;
  }
};

inline LayerSpec pit_layer(int in, int out, int rf_max,
                           ActivationKind act = ActivationKind::none) {
  LayerSpec s;
  s.kind = LayerKind::pit_conv;
  s.in_channels = in;
  s.out_channels = out;
  s.rf_max = rf_max;
  s.activation = act;
  return s;
}

inline LayerSpec conv_layer(int in, int out, int kernel, int dilation) {
  LayerSpec s;
  s.kind = LayerKind::conv;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = kernel;
  s.dilation = dilation;
  return s;
}

inline NetworkConfig regression_net(int input_channels, std::vector<LayerSpec> layers) {
  NetworkConfig cfg;
  cfg.input_channels = input_channels;
  cfg.layers = std::move(layers);
  cfg.task = Task::regression;
  cfg.loss = LossKind::mse;
  return cfg;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pit_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Direct evaluation of the causal dilated convolution, one sample [C x T].
inline std::vector<double> naive_conv(const std::vector<double>& x, std::size_t ci, std::size_t t,
                                      const std::vector<double>& w, std::size_t co, std::size_t k,
                                      std::size_t d, const std::vector<double>& bias) {
  std::vector<double> y(co * t, 0.0);
  for (std::size_t m = 0; m < co; ++m)
    for (std::size_t tt = 0; tt < t; ++tt) {
      double acc = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t l = 0; l < ci; ++l) {
          if (tt < d * i) continue;
          acc += x[l * t + tt - d * i] * w[(m * ci + l) * k + i];
        }
      y[m * t + tt] = acc + (bias.empty() ? 0.0 : bias[m]);
    }
  return y;
}

}  // namespace pit::test
