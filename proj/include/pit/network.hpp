#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "pit/autodiff.hpp"
#include "pit/binio.hpp"
#include "pit/mask.hpp"
#include "pit/rng.hpp"
#include "pit/tensor.hpp"

namespace pit {

enum class LayerKind { pit_conv, conv, linear, pool, activation };
enum class ActivationKind { none, relu };
enum class Task { regression, multilabel };
enum class LossKind { mse, mae, bce };

NLOHMANN_JSON_SERIALIZE_ENUM(LayerKind, {{LayerKind::pit_conv, "pit_conv"},
                                         {LayerKind::conv, "conv"},
                                         {LayerKind::linear, "linear"},
                                         {LayerKind::pool, "pool"},
                                         {LayerKind::activation, "activation"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ActivationKind, {{ActivationKind::none, "none"},
                                              {ActivationKind::relu, "relu"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Task, {{Task::regression, "regression"},
                                    {Task::multilabel, "multilabel"}})
NLOHMANN_JSON_SERIALIZE_ENUM(LossKind, {{LossKind::mse, "mse"},
                                        {LossKind::mae, "mae"},
                                        {LossKind::bce, "bce"}})

/// One entry of the ordered layer list. Fields irrelevant to `kind` are ignored.
struct LayerSpec {
  LayerKind kind = LayerKind::pit_conv;
  int in_channels = 0;
  int out_channels = 0;
  int rf_max = 0;    // pit_conv: seed filter length, time-steps
  int kernel = 0;    // conv
  int dilation = 1;  // conv
  int window = 0;    // pool: 0 = global average over time
  ActivationKind activation = ActivationKind::none;
  bool bias = true;
};

struct NetworkConfig {
  int input_channels = 1;
  std::vector<LayerSpec> layers;
  Task task = Task::regression;
  LossKind loss = LossKind::mse;
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::pit_conv: return "pit_conv";
    case LayerKind::conv: return "conv";
    case LayerKind::linear: return "linear";
    case LayerKind::pool: return "pool";
    case LayerKind::activation: return "activation";
  }
  return "?";
}

/// Checks channel continuity, time-axis availability and task/output agreement.
inline void validate(const NetworkConfig& cfg, bool require_pit_layer = true) {
  if (cfg.input_channels < 1) throw Error("input_channels must be >= 1");
  int channels = cfg.input_channels;
  bool has_time = true;
  bool any_pit = false;
  for (std::size_t idx = 0; idx < cfg.layers.size(); ++idx) {
    const LayerSpec& l = cfg.layers[idx];
    const std::string where = "layer " + std::to_string(idx) + " (" + kind_name(l.kind) + "): ";
    auto check_channels = [&] {
      if (l.in_channels != channels) {
        throw Error(where + "in_channels " + std::to_string(l.in_channels) +
                    " does not match incoming " + std::to_string(channels) + " channels");
      }
      if (l.out_channels < 1) throw Error(where + "out_channels must be >= 1");
    };
    switch (l.kind) {
      case LayerKind::pit_conv:
        if (!has_time) throw Error(where + "needs a time axis");
        check_channels();
        if (l.rf_max < 2) throw Error(where + "rf_max must be >= 2");
        any_pit = true;
        channels = l.out_channels;
        break;
      case LayerKind::conv:
        if (!has_time) throw Error(where + "needs a time axis");
        check_channels();
        if (l.kernel < 1) throw Error(where + "kernel must be >= 1");
        if (l.dilation < 1) throw Error(where + "dilation must be >= 1");
        channels = l.out_channels;
        break;
      case LayerKind::linear:
        if (has_time) throw Error(where + "expects pooled [N x C] input; add a global pool");
        check_channels();
        channels = l.out_channels;
        break;
      case LayerKind::pool:
        if (!has_time) throw Error(where + "needs a time axis");
        if (l.window < 0) throw Error(where + "window must be >= 0");
        if (l.window == 0) has_time = false;
        break;
      case LayerKind::activation:
        if (l.activation == ActivationKind::none) throw Error(where + "activation kind missing");
        break;
    }
  }
  if (require_pit_layer && !any_pit) throw Error("network needs at least one pit_conv layer");
  if (cfg.task == Task::regression && !has_time) {
    throw Error("regression networks must keep the time axis");
  }
  if (cfg.task == Task::multilabel && has_time) {
    throw Error("multilabel networks must end with a global pool");
  }
  if ((cfg.loss == LossKind::bce) != (cfg.task == Task::multilabel)) {
    throw Error("loss bce pairs with task multilabel, mse/mae with regression");
  }
}

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = nlohmann::json{{"kind", l.kind}};
  switch (l.kind) {
    case LayerKind::pit_conv:
      j.update({{"in_channels", l.in_channels}, {"out_channels", l.out_channels},
                {"rf_max", l.rf_max}, {"activation", l.activation}, {"bias", l.bias}});
      break;
    case LayerKind::conv:
      j.update({{"in_channels", l.in_channels}, {"out_channels", l.out_channels},
                {"kernel", l.kernel}, {"dilation", l.dilation}, {"activation", l.activation},
                {"bias", l.bias}});
      break;
    case LayerKind::linear:
      j.update({{"in_channels", l.in_channels}, {"out_channels", l.out_channels},
                {"activation", l.activation}, {"bias", l.bias}});
      break;
    case LayerKind::pool: j["window"] = l.window; break;
    case LayerKind::activation: j["activation"] = l.activation; break;
  }
}

/// Reads an enum field, rejecting strings outside the enum's vocabulary.
template <class E>
E enum_field(const nlohmann::json& j, const char* key, E fallback) {
  if (!j.contains(key)) return fallback;
  const E e = j[key].get<E>();
  if (nlohmann::json(e) != j[key]) throw Error(std::string("unknown ") + key + " " + j[key].dump());
  return e;
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  l = LayerSpec{};
  if (!j.contains("kind")) throw Error("layer without kind: " + j.dump());
  l.kind = enum_field(j, "kind", LayerKind::pit_conv);
  l.in_channels = j.value("in_channels", 0);
  l.out_channels = j.value("out_channels", 0);
  l.rf_max = j.value("rf_max", 0);
  l.kernel = j.value("kernel", 0);
  l.dilation = j.value("dilation", 1);
  l.window = j.value("window", 0);
  l.activation = enum_field(j, "activation", ActivationKind::none);
  l.bias = j.value("bias", true);
}

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"task", c.task},
                     {"loss", c.loss},
                     {"layers", c.layers}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.input_channels = j.at("input_channels").get<int>();
  c.task = enum_field(j, "task", Task::regression);
  c.loss = enum_field(j, "loss", LossKind::mse);
  c.layers.clear();
  for (const auto& lj : j.at("layers")) c.layers.push_back(lj.get<LayerSpec>());
}

inline NetworkConfig load_network_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open network config " + path.string());
  try {
    return nlohmann::json::parse(in).get<NetworkConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed network config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------

/// Per-layer dilation switches: trainable gamma-hat floats plus the cached
/// constant matrices of the mask transform.
struct GammaSet {
  MaskSpec spec;
  Tensor g_hat;
  double delta = 0.5;
  bool frozen = false;
  ConstantMatrices mats;

  static GammaSet make(int rf_max, double delta = 0.5) {
    GammaSet g;
    g.spec = MaskSpec::make(rf_max);
    g.g_hat = Tensor({static_cast<std::size_t>(g.spec.levels)}, 1.0);
    g.delta = delta;
    g.mats = build_constant_matrices(g.spec);
    return g;
  }

  Bits binarized() const {
    Bits bits(g_hat.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = g_hat[i] >= delta ? 1 : 0;
    bits[0] = 1;
    return bits;
  }

  Dilation dilation() const { return extract_dilation(binarized(), spec.rf_max); }

  int alive_taps() const {
    const Bits m = mask_oracle(binarized(), spec.rf_max);
    return static_cast<int>(std::count(m.begin(), m.end(), 1));
  }

  void set_dilation(int d) {
    const Bits bits = gamma_for_dilation(spec, d);
    for (std::size_t i = 0; i < bits.size(); ++i) g_hat[i] = bits[i];
  }
};

struct PitConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  Tensor weight;  // [C_out x C_in x rf_max]
  std::optional<Tensor> bias;
  GammaSet gamma;
  ActivationKind activation = ActivationKind::none;
};

struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  int dilation = 1;
  Tensor weight;  // [C_out x C_in x K]
  std::optional<Tensor> bias;
  ActivationKind activation = ActivationKind::none;
};

struct LinearLayer {
  int in_channels = 0;
  int out_channels = 0;
  Tensor weight;  // [out x in]
  std::optional<Tensor> bias;
  ActivationKind activation = ActivationKind::none;
};

struct PoolLayer {
  int window = 0;
};

struct ActivationLayer {
  ActivationKind kind = ActivationKind::relu;
};

using Layer = std::variant<PitConvLayer, ConvLayer, LinearLayer, PoolLayer, ActivationLayer>;

/// A trainable tensor with a stable name, used by the optimizer and the
/// checkpoint/model formats.
struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool is_gamma;
};

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

class Network {
 public:
  Network() = default;

  /// Seed network: gamma-hat all 1, weights and biases uniform in
  /// +-1/sqrt(fan_in) with fan_in = C_in * K (conv) or in (linear), one
  /// stream per layer derived from `seed`.
  static Network build(const NetworkConfig& cfg, std::uint64_t seed,
                       bool require_pit_layer = true) {
    validate(cfg, require_pit_layer);
    Network net;
    net.config_ = cfg;
    const std::uint64_t init_seed = derive_seed(seed, stream::init);
    for (std::size_t idx = 0; idx < cfg.layers.size(); ++idx) {
      const LayerSpec& s = cfg.layers[idx];
      Rng rng(derive_seed(init_seed, idx));
      auto fill = [&rng](Tensor& t, double bound) {
        for (double& v : t.values()) v = rng.uniform(-bound, bound);
      };
      auto uz = [](int v) { return static_cast<std::size_t>(v); };
      switch (s.kind) {
        case LayerKind::pit_conv: {
          PitConvLayer l{s.in_channels, s.out_channels,
                         Tensor({uz(s.out_channels), uz(s.in_channels), uz(s.rf_max)}),
                         std::nullopt, GammaSet::make(s.rf_max), s.activation};
          const double bound = 1.0 / std::sqrt(static_cast<double>(s.in_channels * s.rf_max));
          fill(l.weight, bound);
          if (s.bias) {
            l.bias = Tensor({uz(s.out_channels)});
            fill(*l.bias, bound);
          }
          net.layers_.emplace_back(std::move(l));
          break;
        }
        case LayerKind::conv: {
          ConvLayer l{s.in_channels, s.out_channels, s.dilation,
                      Tensor({uz(s.out_channels), uz(s.in_channels), uz(s.kernel)}),
                      std::nullopt, s.activation};
          const double bound = 1.0 / std::sqrt(static_cast<double>(s.in_channels * s.kernel));
          fill(l.weight, bound);
          if (s.bias) {
            l.bias = Tensor({uz(s.out_channels)});
            fill(*l.bias, bound);
          }
          net.layers_.emplace_back(std::move(l));
          break;
        }
        case LayerKind::linear: {
          LinearLayer l{s.in_channels, s.out_channels,
                        Tensor({uz(s.out_channels), uz(s.in_channels)}), std::nullopt,
                        s.activation};
          const double bound = 1.0 / std::sqrt(static_cast<double>(s.in_channels));
          fill(l.weight, bound);
          if (s.bias) {
            l.bias = Tensor({uz(s.out_channels)});
            fill(*l.bias, bound);
          }
          net.layers_.emplace_back(std::move(l));
          break;
        }
        case LayerKind::pool: net.layers_.emplace_back(PoolLayer{s.window}); break;
        case LayerKind::activation: net.layers_.emplace_back(ActivationLayer{s.activation}); break;
      }
    }
    return net;
  }

  const NetworkConfig& config() const noexcept { return config_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }

  /// Forward pass. Pit layers build their mask differentiably only when
  /// `train_gammas` is set and the layer is not frozen; otherwise the mask
  /// enters as a constant from the binarized gammas.
  Var forward(Tape& tape, const Var& input, bool train_gammas = false) {
    Var x = input;
    for (Layer& layer : layers_) {
      x = std::visit(
          overloaded{
              [&](PitConvLayer& l) {
                Var mask;
                if (train_gammas && !l.gamma.frozen) {
                  Var bits = heaviside_ste(tape.leaf(l.gamma.g_hat), l.gamma.delta);
                  mask = build_mask(tape, bits, l.gamma.mats);
                } else {
                  mask = tape.constant(mask_values(l.gamma.binarized(), l.gamma.mats));
                }
                Var w = mask_taps(tape.leaf(l.weight), mask);
                std::optional<Var> b;
                if (l.bias) b = tape.leaf(*l.bias);
                return activate(conv1d_causal(x, w, b, 1), l.activation);
              },
              [&](ConvLayer& l) {
                std::optional<Var> b;
                if (l.bias) b = tape.leaf(*l.bias);
                return activate(conv1d_causal(x, tape.leaf(l.weight), b,
                                              static_cast<std::size_t>(l.dilation)),
                                l.activation);
              },
              [&](LinearLayer& l) {
                std::optional<Var> b;
                if (l.bias) b = tape.leaf(*l.bias);
                return activate(linear(x, tape.leaf(l.weight), b), l.activation);
              },
              [&](PoolLayer& l) { return avg_pool_time(x, static_cast<std::size_t>(l.window)); },
              [&](ActivationLayer& l) { return activate(x, l.kind); },
          },
          layer);
    }
    return x;
  }

  /// Convenience inference on a constant input.
  Tensor predict(const Tensor& input) {
    Tape tape;
    tape.no_grad = true;
    return forward(tape, tape.constant(input)).to_tensor();
  }

  /// Parameters in a fixed order: per layer weight, bias, then gamma.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    for (std::size_t idx = 0; idx < layers_.size(); ++idx) {
      const std::string p = "layer" + std::to_string(idx) + ".";
      std::visit(overloaded{
                     [&](PitConvLayer& l) {
                       out.push_back({p + "weight", &l.weight, false});
                       if (l.bias) out.push_back({p + "bias", &*l.bias, false});
                       out.push_back({p + "gamma", &l.gamma.g_hat, true});
                     },
                     [&](ConvLayer& l) {
                       out.push_back({p + "weight", &l.weight, false});
                       if (l.bias) out.push_back({p + "bias", &*l.bias, false});
                     },
                     [&](LinearLayer& l) {
                       out.push_back({p + "weight", &l.weight, false});
                       if (l.bias) out.push_back({p + "bias", &*l.bias, false});
                     },
                     [](auto&) {},
                 },
                 layers_[idx]);
    }
    return out;
  }

  std::vector<PitConvLayer*> pit_layers() {
    std::vector<PitConvLayer*> out;
    for (Layer& l : layers_) {
      if (auto* p = std::get_if<PitConvLayer>(&l)) out.push_back(p);
    }
    return out;
  }

  std::vector<const PitConvLayer*> pit_layers() const {
    std::vector<const PitConvLayer*> out;
    for (const Layer& l : layers_) {
      if (const auto* p = std::get_if<PitConvLayer>(&l)) out.push_back(p);
    }
    return out;
  }

  /// Current dilation of every pit_conv layer, in order.
  std::vector<int> dilations() const {
    std::vector<int> out;
    for (const auto* l : pit_layers()) out.push_back(l->gamma.dilation().dilation);
    return out;
  }

  /// Sets the gammas of every pit_conv layer to the canonical encoding of `d`.
  void set_dilations(const std::vector<int>& d) {
    auto layers = pit_layers();
    if (d.size() != layers.size()) {
      throw Error("expected " + std::to_string(layers.size()) + " dilations, got " +
                  std::to_string(d.size()));
    }
    for (std::size_t i = 0; i < d.size(); ++i) layers[i]->gamma.set_dilation(d[i]);
  }

  void freeze_gammas() {
    for (auto* l : pit_layers()) l->gamma.frozen = true;
  }

  bool all_frozen() const {
    for (const auto* l : pit_layers()) {
      if (!l->gamma.frozen) return false;
    }
    return true;
  }

  /// Replaces the stored config (used when reconstructing from files).
  void set_config(NetworkConfig cfg) { config_ = std::move(cfg); }

 private:
  static Var activate(const Var& x, ActivationKind kind) {
    return kind == ActivationKind::relu ? relu(x) : x;
  }

  NetworkConfig config_;
  std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Size accounting

/// Weights plus biases. Pit layers count alive taps of the current mask.
inline std::int64_t count_params(const Network& net) {
  std::int64_t total = 0;
  for (const Layer& layer : net.layers()) {
    std::visit(overloaded{
                   [&](const PitConvLayer& l) {
                     total += std::int64_t{l.in_channels} * l.out_channels * l.gamma.alive_taps();
                     if (l.bias) total += l.out_channels;
                   },
                   [&](const ConvLayer& l) {
                     total += static_cast<std::int64_t>(l.weight.size());
                     if (l.bias) total += l.out_channels;
                   },
                   [&](const LinearLayer& l) {
                     total += static_cast<std::int64_t>(l.weight.size());
                     if (l.bias) total += l.out_channels;
                   },
                   [](const auto&) {},
               },
               layer);
  }
  return total;
}

/// Seed-size count straight from a config (pit layers at full rf_max).
inline std::int64_t count_params(const NetworkConfig& cfg) {
  std::int64_t total = 0;
  for (const LayerSpec& l : cfg.layers) {
    const std::int64_t cc = std::int64_t{l.in_channels} * l.out_channels;
    const std::int64_t b = l.bias ? l.out_channels : 0;
    switch (l.kind) {
      case LayerKind::pit_conv: total += cc * l.rf_max + b; break;
      case LayerKind::conv: total += cc * l.kernel + b; break;
      case LayerKind::linear: total += cc + b; break;
      default: break;
    }
  }
  return total;
}

/// Convolution weights only (no biases, no linear layers).
inline std::int64_t count_conv_weights(const Network& net) {
  std::int64_t total = 0;
  for (const Layer& layer : net.layers()) {
    if (const auto* p = std::get_if<PitConvLayer>(&layer)) {
      total += std::int64_t{p->in_channels} * p->out_channels * p->gamma.alive_taps();
    } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      total += static_cast<std::int64_t>(c->weight.size());
    }
  }
  return total;
}

/// Number of distinct dilation assignments reachable by the pit layers:
/// the product of their level counts L.
inline double search_space_size(const NetworkConfig& cfg) {
  double total = 1.0;
  for (const LayerSpec& l : cfg.layers) {
    if (l.kind == LayerKind::pit_conv) total *= compute_levels(l.rf_max);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Extraction

/// Turns every frozen pit_conv layer into a plain dilated conv that keeps
/// only the surviving taps, in time order. Forward outputs are bitwise equal
/// to the masked network's.
inline Network export_extracted(const Network& net) {
  if (!net.all_frozen()) throw Error("export_extracted: all gammas must be frozen");
  Network out;
  NetworkConfig cfg = net.config();
  std::vector<Layer> layers;
  for (std::size_t idx = 0; idx < net.layers().size(); ++idx) {
    const Layer& layer = net.layers()[idx];
    if (const auto* p = std::get_if<PitConvLayer>(&layer)) {
      const Dilation dil = p->gamma.dilation();
      const auto co = static_cast<std::size_t>(p->out_channels);
      const auto ci = static_cast<std::size_t>(p->in_channels);
      const auto rf = static_cast<std::size_t>(p->gamma.spec.rf_max);
      const auto taps = static_cast<std::size_t>(dil.taps);
      ConvLayer c{p->in_channels, p->out_channels, dil.dilation, Tensor({co, ci, taps}), p->bias,
                  p->activation};
      for (std::size_t r = 0; r < co * ci; ++r)
        for (std::size_t i = 0; i < taps; ++i)
          c.weight[r * taps + i] = p->weight[r * rf + i * static_cast<std::size_t>(dil.dilation)];
      layers.emplace_back(std::move(c));
      LayerSpec& s = cfg.layers[idx];
      s.kind = LayerKind::conv;
      s.kernel = dil.taps;
      s.dilation = dil.dilation;
      s.rf_max = 0;
    } else {
      layers.push_back(layer);
    }
  }
  out = Network();
  out.set_config(cfg);
  out.layers() = std::move(layers);
  return out;
}

// ---------------------------------------------------------------------------
// Model files: config.json + weights.bin (little-endian f64) + manifest.json

inline void write_model(const std::filesystem::path& dir, Network& net) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream cfg(dir / "config.json");
    if (!cfg) throw Error("cannot write " + (dir / "config.json").string());
    cfg << nlohmann::json(net.config()).dump(2) << '\n';
  }
  nlohmann::json manifest;
  manifest["format"] = "pit-model";
  manifest["version"] = 1;
  manifest["blob"] = "weights.bin";
  manifest["tensors"] = nlohmann::json::array();
  binio::Writer blob(dir / "weights.bin");
  std::uint64_t offset = 0;
  for (const ParamRef& p : net.parameters()) {
    manifest["tensors"].push_back({{"name", p.name},
                                   {"shape", p.tensor->shape()},
                                   {"offset", offset},
                                   {"count", p.tensor->size()}});
    blob.f64(p.tensor->data());
    offset += p.tensor->size();
  }
  blob.close();
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw Error("cannot write " + (dir / "manifest.json").string());
  mf << manifest.dump(2) << '\n';
}

/// Rebuilds a network from files written by write_model.
inline Network read_model(const std::filesystem::path& dir) {
  const NetworkConfig cfg = load_network_config(dir / "config.json");
  Network net = Network::build(cfg, 0, false);
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw Error("cannot open " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(mf);
  binio::Reader blob(dir / manifest.at("blob").get<std::string>());
  auto params = net.parameters();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != params.size()) throw Error("model manifest does not match config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].at("name") != params[i].name ||
        tensors[i].at("count").get<std::size_t>() != params[i].tensor->size()) {
      throw Error("model manifest entry " + std::to_string(i) + " does not match config");
    }
    params[i].tensor->values() = blob.f64(params[i].tensor->size());
  }
  return net;
}

}  // namespace pit
