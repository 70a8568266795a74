#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pit/binio.hpp"
#include "pit/network.hpp"
#include "pit/rng.hpp"
#include "pit/tensor.hpp"

namespace pit {

enum class Split { train, val, test };

/// Sequences [N x C_in x T] with targets [N x C_out x T] (regression) or
/// [N x C_out] (multilabel). Splits are contiguous: train, then val, then test.
struct Dataset {
  Task task = Task::regression;
  Tensor inputs;
  Tensor targets;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;

  std::size_t size() const { return inputs.rank() == 3 ? inputs.dim(0) : 0; }
  std::size_t input_channels() const { return inputs.dim(1); }
  std::size_t length() const { return inputs.dim(2); }
  std::size_t output_channels() const { return targets.dim(1); }

  std::pair<std::size_t, std::size_t> range(Split s) const {
    switch (s) {
      case Split::train: return {0, n_train};
      case Split::val: return {n_train, n_train + n_val};
      case Split::test: return {n_train + n_val, n_train + n_val + n_test};
    }
    return {0, 0};
  }

  std::size_t count(Split s) const {
    auto [a, b] = range(s);
    return b - a;
  }

  Tensor gather_inputs(std::span<const std::size_t> idx) const { return gather(inputs, idx); }
  Tensor gather_targets(std::span<const std::size_t> idx) const { return gather(targets, idx); }

  /// Consecutive samples [first, first + n).
  Tensor slice_inputs(std::size_t first, std::size_t n) const { return slice(inputs, first, n); }
  Tensor slice_targets(std::size_t first, std::size_t n) const { return slice(targets, first, n); }

  void validate() const {
    if (inputs.rank() != 3 || size() == 0) throw Error("dataset needs N >= 1 sequences [N x C x T]");
    const std::size_t want_rank = task == Task::regression ? 3 : 2;
    if (targets.rank() != want_rank || targets.dim(0) != size()) {
      throw Error("dataset targets " + shape_str(targets.shape()) + " inconsistent with inputs " +
                  shape_str(inputs.shape()));
    }
    if (task == Task::regression && targets.dim(2) != length()) {
      throw Error("regression targets must share the input length");
    }
    if (n_train + n_val + n_test != size()) throw Error("dataset split sizes do not sum to N");
    if (n_train == 0) throw Error("dataset has an empty training split");
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  static std::size_t row_size(const Tensor& t) { return t.size() / t.dim(0); }

  static Tensor gather(const Tensor& t, std::span<const std::size_t> idx) {
    Shape shape = t.shape();
    shape[0] = idx.size();
    Tensor out(shape);
    const std::size_t row = row_size(t);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(idx[k] * row), row,
                  out.data().begin() + static_cast<std::ptrdiff_t>(k * row));
    }
    return out;
  }

  static Tensor slice(const Tensor& t, std::size_t first, std::size_t n) {
    Shape shape = t.shape();
    shape[0] = n;
    const std::size_t row = row_size(t);
    auto begin = t.data().begin() + static_cast<std::ptrdiff_t>(first * row);
    return Tensor(shape, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(n * row)));
  }
};

struct SplitFractions {
  double val = 0.2;
  double test = 0.0;
};

inline void assign_splits(Dataset& d, const SplitFractions& f) {
  if (f.val < 0 || f.test < 0 || f.val + f.test >= 1.0) throw Error("invalid split fractions");
  const std::size_t n = d.size();
  d.n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.val));
  d.n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.test));
  if (d.n_val + d.n_test >= n) throw Error("split fractions leave no training data");
  d.n_train = n - d.n_val - d.n_test;
}

// ---------------------------------------------------------------------------
// Teacher-student regression

struct TeacherManifest {
  NetworkConfig config;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t length = 0;
  double noise_sigma = 0.0;
  std::vector<std::pair<std::string, std::vector<double>>> weights;
};

inline nlohmann::json to_json(const TeacherManifest& m) {
  nlohmann::json j{{"kind", "teacher"},       {"seed", m.seed},
                   {"n", m.n},                {"length", m.length},
                   {"noise_sigma", m.noise_sigma}, {"config", m.config}};
  j["weights"] = nlohmann::json::array();
  for (const auto& [name, values] : m.weights) j["weights"].push_back({{"name", name}, {"values", values}});
  return j;
}

inline TeacherManifest teacher_manifest_from_json(const nlohmann::json& j) {
  TeacherManifest m;
  m.config = j.at("config").get<NetworkConfig>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.n = j.at("n").get<std::size_t>();
  m.length = j.at("length").get<std::size_t>();
  m.noise_sigma = j.at("noise_sigma").get<double>();
  for (const auto& w : j.at("weights")) {
    m.weights.emplace_back(w.at("name").get<std::string>(), w.at("values").get<std::vector<double>>());
  }
  return m;
}

/// Rebuilds the teacher network recorded in a manifest.
inline Network teacher_from_manifest(const TeacherManifest& m) {
  Network net = Network::build(m.config, 0, false);
  auto params = net.parameters();
  if (params.size() != m.weights.size()) throw Error("teacher manifest does not match its config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != m.weights[i].first || params[i].tensor->size() != m.weights[i].second.size()) {
      throw Error("teacher manifest entry " + m.weights[i].first + " does not match its config");
    }
    params[i].tensor->values() = m.weights[i].second;
  }
  return net;
}

namespace detail {

inline Tensor forward_in_chunks(Network& net, const Tensor& inputs, std::size_t chunk = 256) {
  const std::size_t n = inputs.dim(0);
  const std::size_t row = inputs.size() / n;
  std::vector<double> out;
  Shape out_shape;
  for (std::size_t first = 0; first < n; first += chunk) {
    const std::size_t m = std::min(chunk, n - first);
    Shape s = inputs.shape();
    s[0] = m;
    auto begin = inputs.data().begin() + static_cast<std::ptrdiff_t>(first * row);
    Tensor part(s, std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(m * row)));
    Tensor y = net.predict(part);
    out_shape = y.shape();
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  out_shape[0] = n;
  return Tensor(out_shape, std::move(out));
}

}  // namespace detail

/// Standard-normal inputs through a fixed-dilation teacher, plus Gaussian
/// target noise. Sample i draws from derive_seed(derive_seed(seed, tag), i).
inline std::pair<Dataset, TeacherManifest> generate_teacher_dataset(
    const NetworkConfig& teacher_cfg, std::size_t n, std::size_t length, double noise_sigma,
    std::uint64_t seed, SplitFractions splits = {}) {
  if (n == 0) throw Error("teacher dataset needs n >= 1");
  if (length == 0) throw Error("teacher dataset needs T >= 1");
  if (noise_sigma < 0) throw Error("noise_sigma must be >= 0");
  if (teacher_cfg.task != Task::regression) throw Error("teacher networks must be regression");
  for (std::size_t i = 0; i < teacher_cfg.layers.size(); ++i) {
    const LayerSpec& l = teacher_cfg.layers[i];
    if (l.kind == LayerKind::pit_conv) {
      throw Error("teacher layer " + std::to_string(i) + ": use conv layers with fixed dilation");
    }
    if (l.kind == LayerKind::conv &&
        (l.dilation < 1 || !std::has_single_bit(static_cast<unsigned>(l.dilation)))) {
      throw Error("teacher layer " + std::to_string(i) + ": dilation " +
                  std::to_string(l.dilation) + " is not a power of two");
    }
  }
  Network teacher = Network::build(teacher_cfg, derive_seed(seed, stream::teacher), false);

  Dataset d;
  d.task = Task::regression;
  const auto cin = static_cast<std::size_t>(teacher_cfg.input_channels);
  d.inputs = Tensor({n, cin, length});
  const std::uint64_t in_seed = derive_seed(seed, stream::inputs);
  const std::size_t row = cin * length;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(in_seed, i));
    for (std::size_t k = 0; k < row; ++k) d.inputs[i * row + k] = rng.normal();
  }
  d.targets = detail::forward_in_chunks(teacher, d.inputs);
  if (noise_sigma > 0) {
    const std::uint64_t noise_seed = derive_seed(seed, stream::noise);
    const std::size_t trow = d.targets.size() / n;
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(noise_seed, i));
      for (std::size_t k = 0; k < trow; ++k) d.targets[i * trow + k] += noise_sigma * rng.normal();
    }
  }
  assign_splits(d, splits);

  TeacherManifest m{teacher_cfg, seed, n, length, noise_sigma, {}};
  for (const ParamRef& p : teacher.parameters()) m.weights.emplace_back(p.name, p.tensor->values());
  return {std::move(d), std::move(m)};
}

// ---------------------------------------------------------------------------
// Multi-scale periodic multilabel task

struct MultiscaleOptions {
  double noise_sigma = 0.2;
  double amplitude_min = 0.5;
  double amplitude_max = 1.5;
};

/// Each sequence sums sinusoids for a subset of `periods` (random amplitude
/// and phase) plus white noise; target j marks whether period j is present.
/// Every label is positive in exactly floor(n / 2) sequences.
inline Dataset generate_multiscale_dataset(const std::vector<int>& periods, std::size_t n,
                                           std::size_t length, std::uint64_t seed,
                                           MultiscaleOptions opt = {}, SplitFractions splits = {}) {
  if (n == 0) throw Error("multiscale dataset needs n >= 1");
  if (periods.empty()) throw Error("multiscale dataset needs at least one period");
  for (int p : periods) {
    if (p < 2 || static_cast<std::size_t>(p) * 2 > length) {
      throw Error("period " + std::to_string(p) + " outside [2, T/2] for T=" + std::to_string(length));
    }
  }
  const std::size_t labels = periods.size();
  Dataset d;
  d.task = Task::multilabel;
  d.inputs = Tensor({n, 1, length});
  d.targets = Tensor({n, labels});

  const std::uint64_t label_seed = derive_seed(seed, stream::labels);
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < labels; ++j) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(label_seed, j));
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t r = 0; r < n / 2; ++r) d.targets[order[r] * labels + j] = 1.0;
  }

  const std::uint64_t in_seed = derive_seed(seed, stream::inputs);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(in_seed, i));
    double* x = d.inputs.data().data() + i * length;
    for (std::size_t j = 0; j < labels; ++j) {
      const double amp = rng.uniform(opt.amplitude_min, opt.amplitude_max);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      if (d.targets[i * labels + j] == 0.0) continue;
      const double w = 2.0 * std::numbers::pi / periods[j];
      for (std::size_t t = 0; t < length; ++t) x[t] += amp * std::sin(w * static_cast<double>(t) + phase);
    }
    if (opt.noise_sigma > 0) {
      for (std::size_t t = 0; t < length; ++t) x[t] += opt.noise_sigma * rng.normal();
    }
  }
  assign_splits(d, splits);
  return d;
}

// ---------------------------------------------------------------------------
// Binary dataset file
//
//   offset 0  "PITD"
//          4  u8 version (1)
//          5  u8 task (0 regression, 1 multilabel)
//          6  u16 reserved (0)
//          8  u64 N, C_in, T, C_out, T_out (0 for multilabel),
//             n_train, n_val, n_test
//         72  inputs  N*C_in*T   f64
//             targets N*C_out*max(T_out,1) f64
// All integers and floats little-endian.

inline constexpr std::uint8_t kDatasetVersion = 1;

inline void write_dataset(const std::filesystem::path& path, const Dataset& d) {
  d.validate();
  binio::Writer w(path);
  w.bytes("PITD", 4);
  w.u8(kDatasetVersion);
  w.u8(d.task == Task::regression ? 0 : 1);
  w.u8(0);
  w.u8(0);
  w.u64(d.size());
  w.u64(d.input_channels());
  w.u64(d.length());
  w.u64(d.output_channels());
  w.u64(d.task == Task::regression ? d.targets.dim(2) : 0);
  w.u64(d.n_train);
  w.u64(d.n_val);
  w.u64(d.n_test);
  w.f64(d.inputs.data());
  w.f64(d.targets.data());
  w.close();
}

inline Dataset read_dataset(const std::filesystem::path& path) {
  binio::Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "PITD") throw Error(path.string() + ": not a PITD dataset");
  const auto version = r.u8();
  if (version != kDatasetVersion) {
    throw Error(path.string() + ": unsupported dataset version " + std::to_string(version));
  }
  const auto task = r.u8();
  if (task > 1) throw Error(path.string() + ": unknown task tag");
  r.u8();
  r.u8();
  Dataset d;
  d.task = task == 0 ? Task::regression : Task::multilabel;
  const std::size_t n = r.u64(), cin = r.u64(), t = r.u64(), cout = r.u64(), tout = r.u64();
  d.n_train = r.u64();
  d.n_val = r.u64();
  d.n_test = r.u64();
  const double expect = 72.0 + 8.0 * (static_cast<double>(n) * cin * t +
                                      static_cast<double>(n) * cout * std::max<std::size_t>(tout, 1));
  if (expect != static_cast<double>(std::filesystem::file_size(path))) {
    throw Error(path.string() + ": header dimensions do not match the file size");
  }
  d.inputs = Tensor({n, cin, t}, r.f64(n * cin * t));
  if (d.task == Task::regression) {
    d.targets = Tensor({n, cout, tout}, r.f64(n * cout * tout));
  } else {
    d.targets = Tensor({n, cout}, r.f64(n * cout));
  }
  if (!r.at_end()) throw Error(path.string() + ": trailing bytes after dataset payload");
  d.validate();
  return d;
}

}  // namespace pit
