#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pit/autodiff.hpp"
#include "pit/binio.hpp"
#include "pit/data.hpp"
#include "pit/loss.hpp"
#include "pit/network.hpp"
#include "pit/optim.hpp"
#include "pit/rng.hpp"

// Three-phase dilation search:
//   warmup    steps_wu mini-batch updates of the weights on the performance loss
//   pruning   weights and gammas on performance + size regularizer, until the
//             validation performance loss stops improving
//   finetune  gammas frozen to their binarized values, weights only, at most
//             steps_ft updates with the same early stopping
// One mini-batch stream runs through all phases; an epoch is one pass over
// the shuffled training split and the last partial batch is kept.

namespace pit {

struct TrainConfig {
  std::size_t steps_wu = 0;
  std::optional<std::size_t> steps_ft;  // unset: 10 epochs of steps
  double lambda = 0.0;
  double delta = 0.5;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  std::size_t patience_epochs = 50;
  std::uint64_t rng_seed = 0;
  std::size_t max_epochs = 1000;  // cap on the pruning loop
  double weight_decay = 0.0;      // L2 on weights, all phases

  void validate() const {
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (patience_epochs < 1) throw Error("patience_epochs must be >= 1");
    if (max_epochs < 1) throw Error("max_epochs must be >= 1");
    if (!(lambda >= 0.0)) throw Error("lambda must be >= 0");
    if (!(delta > 0.0 && delta < 1.0)) throw Error("delta must lie in (0, 1)");
    if (!(learning_rate > 0.0)) throw Error("learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw Error("weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps_wu", c.steps_wu},
                     {"steps_ft", c.steps_ft ? nlohmann::json(*c.steps_ft) : nlohmann::json()},
                     {"lambda", c.lambda},
                     {"delta", c.delta},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"patience_epochs", c.patience_epochs},
                     {"rng_seed", c.rng_seed},
                     {"max_epochs", c.max_epochs},
                     {"weight_decay", c.weight_decay}};
}

/// Reads the fields present in `j` over the values already in `c`.
inline void merge_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"steps_wu",    "steps_ft", "lambda",     "delta",
                                "batch_size",  "learning_rate", "patience_epochs",
                                "rng_seed",    "max_epochs",    "weight_decay"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw Error("unknown training option '" + key + "'");
    }
  }
  if (j.contains("steps_wu")) c.steps_wu = j["steps_wu"].get<std::size_t>();
  if (j.contains("steps_ft")) {
    c.steps_ft = j["steps_ft"].is_null() ? std::nullopt
                                         : std::optional<std::size_t>(j["steps_ft"].get<std::size_t>());
  }
  if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
  if (j.contains("delta")) c.delta = j["delta"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("patience_epochs")) c.patience_epochs = j["patience_epochs"].get<std::size_t>();
  if (j.contains("rng_seed")) c.rng_seed = j["rng_seed"].get<std::uint64_t>();
  if (j.contains("max_epochs")) c.max_epochs = j["max_epochs"].get<std::size_t>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  merge_json(j, c);
}

enum class Phase { warmup, pruning, finetune, done };

NLOHMANN_JSON_SERIALIZE_ENUM(Phase, {{Phase::warmup, "warmup"},
                                     {Phase::pruning, "pruning"},
                                     {Phase::finetune, "finetune"},
                                     {Phase::done, "done"}})

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::warmup: return "warmup";
    case Phase::pruning: return "pruning";
    case Phase::finetune: return "finetune";
    case Phase::done: return "done";
  }
  return "?";
}

/// Early-stopping bookkeeping on the validation performance loss.
struct ConvergenceTracker {
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
};

/// Records one epoch's validation loss. Returns true (stop) once `patience`
/// consecutive epochs passed without a strict improvement.
inline bool check_convergence(ConvergenceTracker& state, double val_perf_loss,
                              std::size_t patience) {
  if (val_perf_loss < state.best) {
    state.best = val_perf_loss;
    state.since_improvement = 0;
    return false;
  }
  ++state.since_improvement;
  return state.since_improvement >= patience;
}

/// Freezes every gamma set; masks become constants.
inline void freeze_gammas(Network& net) { net.freeze_gammas(); }

/// Shuffled pass over the training indices, reshuffled lazily when a new
/// epoch starts.
struct BatchStream {
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::size_t epoch = 0;  // completed passes
  Rng rng;

  /// Returns the next batch and whether it closed an epoch.
  std::pair<std::vector<std::size_t>, bool> next(std::size_t n_train, std::size_t batch) {
    if (order.empty() || cursor >= order.size()) {
      order.resize(n_train);
      for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
      rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    const std::size_t end = std::min(cursor + batch, order.size());
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    cursor = end;
    const bool closed = cursor == order.size();
    if (closed) ++epoch;
    return {std::move(idx), closed};
  }
};

struct PhaseHistory {
  std::vector<double> warmup;
  std::vector<double> pruning;
  std::vector<double> finetune;

  friend bool operator==(const PhaseHistory&, const PhaseHistory&) = default;
};

struct TrainState {
  Phase phase = Phase::warmup;
  std::size_t step = 0;          // optimizer steps, all phases
  std::size_t phase_step = 0;    // steps in the current phase
  std::size_t phase_epochs = 0;  // epoch ends seen in the current phase
  std::size_t steps_warmup = 0;
  std::size_t steps_pruning = 0;
  std::size_t steps_finetune = 0;
  BatchStream batches;
  ConvergenceTracker tracker;
  std::vector<AdamSlot> slots;  // aligned with Network::parameters()
  PhaseHistory history;
};

struct TrainedResult {
  Network net;
  std::vector<int> dilations;
  PhaseHistory history;
  double final_val_loss = 0.0;
  std::int64_t params = 0;
  std::size_t steps_warmup = 0;
  std::size_t steps_pruning = 0;
  std::size_t steps_finetune = 0;
};

/// Raised when training produces a non-finite loss or gradient.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Mean performance loss over a split, evaluated in chunks.
inline double evaluate_loss(Network& net, const Dataset& data, Split split,
                            std::size_t chunk = 512) {
  const auto [first, last] = data.range(split);
  if (first == last) throw Error("evaluate_loss: empty split");
  double weighted = 0.0;
  for (std::size_t s = first; s < last; s += chunk) {
    const std::size_t m = std::min(chunk, last - s);
    Tape tape;
    tape.no_grad = true;
    Var pred = net.forward(tape, tape.constant(data.slice_inputs(s, m)));
    Var loss = performance_loss(pred, tape.constant(data.slice_targets(s, m)),
                                net.config().loss);
    weighted += loss.item() * static_cast<double>(m);
  }
  return weighted / static_cast<double>(last - first);
}

class PitTrainer {
 public:
  PitTrainer(Network net, const Dataset& data, TrainConfig cfg)
      : net_(std::move(net)), data_(&data), cfg_(std::move(cfg)) {
    cfg_.validate();
    data.validate();
    if (data.n_val == 0) throw Error("training needs a non-empty validation split");
    if (net_.pit_layers().empty()) throw Error("training needs at least one pit_conv layer");
    for (auto* l : net_.pit_layers()) l->gamma.delta = cfg_.delta;
    for (const ParamRef& p : net_.parameters()) p.tensor->set_requires_grad(true);
    state_.batches.rng = Rng(derive_seed(cfg_.rng_seed, stream::shuffle));
    state_.slots.resize(net_.parameters().size());
  }

  const Network& network() const { return net_; }
  Network& network() { return net_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return cfg_; }

  std::size_t steps_ft() const {
    if (cfg_.steps_ft) return *cfg_.steps_ft;
    const std::size_t per_epoch = (data_->n_train + cfg_.batch_size - 1) / cfg_.batch_size;
    return 10 * per_epoch;
  }

  /// Advances by at most `max_steps` optimizer steps. Returns true once done.
  bool run(std::size_t max_steps = std::numeric_limits<std::size_t>::max()) {
    std::size_t budget = max_steps;
    while (state_.phase != Phase::done && budget > 0) {
      switch (state_.phase) {
        case Phase::warmup:
          if (state_.phase_step >= cfg_.steps_wu) {
            enter(Phase::pruning);
            continue;
          }
          if (step(false)) state_.history.warmup.push_back(validation_loss());
          break;
        case Phase::pruning:
          if (step(true)) {
            const double val = validation_loss();
            state_.history.pruning.push_back(val);
            ++state_.phase_epochs;
            const bool converged = check_convergence(state_.tracker, val, cfg_.patience_epochs);
            if (converged || state_.phase_epochs >= cfg_.max_epochs) {
              freeze_gammas(net_);
              enter(Phase::finetune);
            }
          }
          break;
        case Phase::finetune:
          if (state_.phase_step >= steps_ft()) {
            enter(Phase::done);
            continue;
          }
          if (step(false)) {
            const double val = validation_loss();
            state_.history.finetune.push_back(val);
            ++state_.phase_epochs;
            if (check_convergence(state_.tracker, val, cfg_.patience_epochs)) enter(Phase::done);
          }
          break;
        case Phase::done: break;
      }
      --budget;
    }
    return state_.phase == Phase::done;
  }

  TrainedResult result() {
    if (state_.phase != Phase::done) throw Error("result() before training finished");
    TrainedResult r;
    r.final_val_loss = validation_loss();
    r.dilations = net_.dilations();
    r.params = count_params(net_);
    r.history = state_.history;
    r.steps_warmup = state_.steps_warmup;
    r.steps_pruning = state_.steps_pruning;
    r.steps_finetune = state_.steps_finetune;
    r.net = net_;
    return r;
  }

  double validation_loss() { return evaluate_loss(net_, *data_, Split::val); }

  // -------------------------------------------------------------------------
  // Checkpoint: <dir>/manifest.json + <dir>/state.bin (little-endian f64)

  void save_checkpoint(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json m;
    m["format"] = "pit-checkpoint";
    m["version"] = 1;
    m["phase"] = state_.phase;
    m["step"] = state_.step;
    m["phase_step"] = state_.phase_step;
    m["phase_epochs"] = state_.phase_epochs;
    m["steps_per_phase"] = {state_.steps_warmup, state_.steps_pruning, state_.steps_finetune};
    m["epoch"] = state_.batches.epoch;
    m["cursor"] = state_.batches.cursor;
    m["order"] = state_.batches.order;
    m["rng_state"] = state_.batches.rng.state();
    m["best_val_loss"] = std::isfinite(state_.tracker.best) ? nlohmann::json(state_.tracker.best)
                                                            : nlohmann::json();
    m["epochs_since_improvement"] = state_.tracker.since_improvement;
    m["history"] = {{"warmup", state_.history.warmup},
                    {"pruning", state_.history.pruning},
                    {"finetune", state_.history.finetune}};
    m["train_config"] = cfg_;
    m["network_config"] = net_.config();
    m["dataset"] = {{"n_train", data_->n_train}, {"n_val", data_->n_val}};
    nlohmann::json frozen = nlohmann::json::array();
    for (const auto* l : net_.pit_layers()) frozen.push_back(l->gamma.frozen);
    m["gamma_frozen"] = frozen;
    m["blob"] = "state.bin";

    binio::Writer blob(dir / "state.bin");
    std::uint64_t offset = 0;
    nlohmann::json tensors = nlohmann::json::array();
    auto params = net_.parameters();
    auto put = [&](const std::string& name, std::span<const double> values) {
      tensors.push_back({{"name", name}, {"offset", offset}, {"count", values.size()}});
      blob.f64(values);
      offset += values.size();
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
      const AdamSlot& s = state_.slots[i];
      put(params[i].name, params[i].tensor->data());
      put(params[i].name + ".adam_m", s.m);
      put(params[i].name + ".adam_v", s.v);
    }
    blob.close();
    nlohmann::json adam_steps = nlohmann::json::array();
    for (const AdamSlot& s : state_.slots) adam_steps.push_back(s.steps);
    m["adam_steps"] = adam_steps;
    m["tensors"] = tensors;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
    out << m.dump(1) << '\n';
    if (!out) throw Error("write failed: " + (dir / "manifest.json").string());
  }

  /// Restores a trainer saved by save_checkpoint; `data` must be the dataset
  /// the run was started on.
  static PitTrainer resume(const std::filesystem::path& dir, const Dataset& data) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw Error("cannot open checkpoint " + (dir / "manifest.json").string());
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed checkpoint manifest: " + std::string(e.what()));
    }
    if (m.value("format", "") != "pit-checkpoint") throw Error("not a pit checkpoint: " + dir.string());
    if (m.at("dataset").at("n_train") != data.n_train || m.at("dataset").at("n_val") != data.n_val) {
      throw Error("checkpoint was written for a different dataset split");
    }
    const auto cfg = m.at("train_config").get<TrainConfig>();
    const auto net_cfg = m.at("network_config").get<NetworkConfig>();
    PitTrainer t(Network::build(net_cfg, 0), data, cfg);
    TrainState& s = t.state_;
    s.phase = m.at("phase").get<Phase>();
    s.step = m.at("step");
    s.phase_step = m.at("phase_step");
    s.phase_epochs = m.at("phase_epochs");
    s.steps_warmup = m.at("steps_per_phase")[0];
    s.steps_pruning = m.at("steps_per_phase")[1];
    s.steps_finetune = m.at("steps_per_phase")[2];
    s.batches.epoch = m.at("epoch");
    s.batches.cursor = m.at("cursor");
    s.batches.order = m.at("order").get<std::vector<std::size_t>>();
    s.batches.rng.set_state(m.at("rng_state").get<std::string>());
    s.tracker.best = m.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                     : m.at("best_val_loss").get<double>();
    s.tracker.since_improvement = m.at("epochs_since_improvement");
    s.history.warmup = m.at("history").at("warmup").get<std::vector<double>>();
    s.history.pruning = m.at("history").at("pruning").get<std::vector<double>>();
    s.history.finetune = m.at("history").at("finetune").get<std::vector<double>>();
    auto pits = t.net_.pit_layers();
    const auto& frozen = m.at("gamma_frozen");
    if (frozen.size() != pits.size()) throw Error("checkpoint gamma table does not match network");
    for (std::size_t i = 0; i < pits.size(); ++i) pits[i]->gamma.frozen = frozen[i].get<bool>();

    binio::Reader blob(dir / m.at("blob").get<std::string>());
    auto params = t.net_.parameters();
    const auto& tensors = m.at("tensors");
    const auto& adam_steps = m.at("adam_steps");
    if (tensors.size() != 3 * params.size() || adam_steps.size() != params.size()) {
      throw Error("checkpoint tensor table does not match network");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (tensors[3 * i].at("name") != params[i].name) {
        throw Error("checkpoint tensor " + std::to_string(i) + " does not match network");
      }
      auto read = [&](std::size_t k) {
        return blob.f64(tensors[3 * i + k].at("count").get<std::size_t>());
      };
      std::vector<double> values = read(0);
      if (values.size() != params[i].tensor->size()) throw Error("checkpoint tensor size mismatch");
      params[i].tensor->values() = std::move(values);
      s.slots[i].m = read(1);
      s.slots[i].v = read(2);
      s.slots[i].steps = adam_steps[i].get<std::uint64_t>();
    }
    return t;
  }

 private:
  void enter(Phase next) {
    state_.phase = next;
    state_.phase_step = 0;
    state_.phase_epochs = 0;
    state_.tracker = ConvergenceTracker{};
  }

  /// One mini-batch update. Returns true if the batch closed an epoch.
  bool step(bool pruning) {
    auto [idx, epoch_end] = state_.batches.next(data_->n_train, cfg_.batch_size);
    auto params = net_.parameters();
    for (const ParamRef& p : params) p.tensor->zero_grad();
    try {
      Tape tape;
      Var pred = net_.forward(tape, tape.constant(data_->gather_inputs(idx)), pruning);
      Var loss = performance_loss(pred, tape.constant(data_->gather_targets(idx)),
                                  net_.config().loss);
      if (pruning) loss = total_loss(loss, size_regularizer(tape, net_, {cfg_.lambda}));
      tape.backward(loss);
      const AdamConfig adam{cfg_.learning_rate};
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].is_gamma && !pruning) continue;
        if (params[i].is_gamma) {
          optimizer_step(*params[i].tensor, params[i].tensor->grad(), state_.slots[i], adam, true);
        } else if (cfg_.weight_decay > 0.0) {
          std::vector<double> g(params[i].tensor->grad().begin(), params[i].tensor->grad().end());
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += cfg_.weight_decay * (*params[i].tensor)[k];
          optimizer_step(*params[i].tensor, g, state_.slots[i], adam);
        } else {
          optimizer_step(*params[i].tensor, params[i].tensor->grad(), state_.slots[i], adam);
        }
      }
    } catch (const NonFiniteError& e) {
      std::string where;
      if (!diagnostic_dir.empty()) {
        save_checkpoint(diagnostic_dir);
        where = "; diagnostic checkpoint in " + diagnostic_dir.string();
      }
      throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(state_.step) +
                            " (" + phase_name(state_.phase) + ")" + where);
    }
    ++state_.step;
    ++state_.phase_step;
    switch (state_.phase) {
      case Phase::warmup: ++state_.steps_warmup; break;
      case Phase::pruning: ++state_.steps_pruning; break;
      case Phase::finetune: ++state_.steps_finetune; break;
      case Phase::done: break;
    }
    return epoch_end;
  }

 public:
  /// Where to dump state if training diverges; empty disables the dump.
  std::filesystem::path diagnostic_dir;

 private:
  Network net_;
  const Dataset* data_;
  TrainConfig cfg_;
  TrainState state_;
};

/// Runs warmup, pruning and fine-tuning on a freshly built network.
inline TrainedResult run_pit(Network net, const Dataset& data, const TrainConfig& cfg,
                             const std::filesystem::path& diagnostic_dir = {}) {
  PitTrainer trainer(std::move(net), data, cfg);
  trainer.diagnostic_dir = diagnostic_dir;
  trainer.run();
  return trainer.result();
}

/// Plain training of a network with no pit layers (or frozen ones) for
/// exactly `steps` mini-batch updates, drawing batches from the same stream
/// a PitTrainer with the same seed would use.
inline void train_plain(Network& net, const Dataset& data, const TrainConfig& cfg,
                        std::size_t steps) {
  cfg.validate();
  BatchStream batches;
  batches.rng = Rng(derive_seed(cfg.rng_seed, stream::shuffle));
  auto params = net.parameters();
  for (const ParamRef& p : params) p.tensor->set_requires_grad(true);
  std::vector<AdamSlot> slots(params.size());
  const AdamConfig adam{cfg.learning_rate};
  for (std::size_t s = 0; s < steps; ++s) {
    auto [idx, epoch_end] = batches.next(data.n_train, cfg.batch_size);
    (void)epoch_end;
    for (const ParamRef& p : params) p.tensor->zero_grad();
    Tape tape;
    Var pred = net.forward(tape, tape.constant(data.gather_inputs(idx)));
    Var loss = performance_loss(pred, tape.constant(data.gather_targets(idx)), net.config().loss);
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].is_gamma) continue;
      std::vector<double> g(params[i].tensor->grad().begin(), params[i].tensor->grad().end());
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += cfg.weight_decay * (*params[i].tensor)[k];
      optimizer_step(*params[i].tensor, g, slots[i], adam);
    }
  }
}

}  // namespace pit
