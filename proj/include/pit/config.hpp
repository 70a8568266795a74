#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"
#include "pit/trainer.hpp"

namespace pit {

/// Command-line values; unset fields fall through to the file, then defaults.
struct TrainOverrides {
  std::optional<std::size_t> steps_wu;
  std::optional<std::size_t> steps_ft;
  std::optional<double> lambda;
  std::optional<double> delta;
  std::optional<std::size_t> batch_size;
  std::optional<double> learning_rate;
  std::optional<std::size_t> patience_epochs;
  std::optional<std::uint64_t> rng_seed;
  std::optional<std::size_t> max_epochs;
  std::optional<double> weight_decay;
};

inline nlohmann::json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

/// flags > file > defaults
inline TrainConfig resolve_train_config(const nlohmann::json& file, const TrainOverrides& flags) {
  TrainConfig c;
  if (!file.is_null()) {
    if (!file.is_object()) throw Error("training config must be a JSON object");
    merge_json(file, c);
  }
  if (flags.steps_wu) c.steps_wu = *flags.steps_wu;
  if (flags.steps_ft) c.steps_ft = *flags.steps_ft;
  if (flags.lambda) c.lambda = *flags.lambda;
  if (flags.delta) c.delta = *flags.delta;
  if (flags.batch_size) c.batch_size = *flags.batch_size;
  if (flags.learning_rate) c.learning_rate = *flags.learning_rate;
  if (flags.patience_epochs) c.patience_epochs = *flags.patience_epochs;
  if (flags.rng_seed) c.rng_seed = *flags.rng_seed;
  if (flags.max_epochs) c.max_epochs = *flags.max_epochs;
  if (flags.weight_decay) c.weight_decay = *flags.weight_decay;
  c.validate();
  return c;
}

}  // namespace pit
