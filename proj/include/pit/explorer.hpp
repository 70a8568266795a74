#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "pit/data.hpp"
#include "pit/network.hpp"
#include "pit/rng.hpp"
#include "pit/trainer.hpp"

namespace pit {

/// Shortest text that parses back to the same double.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error("format_number failed");
  return std::string(buf, end);
}

inline std::string format_dilations(const std::vector<int>& d) {
  std::string out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i) out += '|';
    out += std::to_string(d[i]);
  }
  return out;
}

/// Parses "(4,4,8,8)", "4|4|8|8" or whitespace-separated tuples. Every entry
/// must be a positive power of two.
inline std::vector<int> parse_dilation_tuple(const std::string& text) {
  std::vector<int> out;
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    int v = 0;
    auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
    if (ec != std::errc{} || p != token.data() + token.size() || v < 1 || !std::has_single_bit(
                                                                           static_cast<unsigned>(v))) {
      throw Error("bad dilation '" + token + "' in '" + text + "'");
    }
    out.push_back(v);
    token.clear();
  };
  for (char c : text) {
    if (c == '(' || c == ')' || c == ',' || c == '|' || c == ' ' || c == '\t') {
      flush();
    } else {
      token += c;
    }
  }
  flush();
  if (out.empty()) throw Error("empty dilation tuple '" + text + "'");
  return out;
}

struct SweepConfig {
  std::vector<double> lambda_grid;
  std::vector<std::size_t> warmup_grid;
  std::size_t repetitions = 1;
  TrainConfig base;
  std::uint64_t base_seed = 0;
  std::size_t workers = 1;

  void validate() const {
    if (lambda_grid.empty()) throw Error("lambda grid is empty");
    if (warmup_grid.empty()) throw Error("warmup grid is empty");
    if (repetitions < 1) throw Error("repetitions must be >= 1");
    for (double l : lambda_grid) {
      if (!(l >= 0.0)) throw Error("lambda values must be >= 0");
    }
    base.validate();
  }
};

enum class PointStatus { ok, failed };

struct ParetoPoint {
  std::int64_t params = 0;
  double perf = 0.0;
  std::vector<int> dilations;
  double lambda = 0.0;
  std::size_t steps_wu = 0;
  std::uint64_t seed = 0;
  PointStatus status = PointStatus::ok;
  std::string error;
};

/// Seed of sweep point (lambda index, warmup index, repetition).
inline std::uint64_t sweep_point_seed(std::uint64_t base, std::size_t li, std::size_t wi,
                                      std::size_t rep) {
  return derive_seed(derive_seed(derive_seed(derive_seed(base, stream::sweep), li), wi), rep);
}

/// Trains one sweep point: the network is built and trained with `seed`.
inline ParetoPoint run_point(const NetworkConfig& net_cfg, const Dataset& data, TrainConfig cfg,
                             double lambda, std::size_t steps_wu, std::uint64_t seed) {
  cfg.lambda = lambda;
  cfg.steps_wu = steps_wu;
  cfg.rng_seed = seed;
  ParetoPoint p;
  p.lambda = lambda;
  p.steps_wu = steps_wu;
  p.seed = seed;
  try {
    TrainedResult r = run_pit(Network::build(net_cfg, seed), data, cfg);
    p.params = r.params;
    p.perf = r.final_val_loss;
    p.dilations = r.dilations;
    if (!std::isfinite(p.perf)) throw NonFiniteError("non-finite validation loss");
  } catch (const Error& e) {
    p.status = PointStatus::failed;
    p.perf = std::numeric_limits<double>::quiet_NaN();
    p.params = 0;
    p.error = e.what();
  }
  return p;
}

/// One point per (lambda, warmup, repetition) in row-major grid order.
/// Points run on a pool of `cfg.workers` threads; each owns its network.
inline std::vector<ParetoPoint> run_sweep(
    const SweepConfig& cfg, const NetworkConfig& net_cfg, const Dataset& data,
    const std::function<void(const ParetoPoint&)>& on_point = {}) {
  cfg.validate();
  validate(net_cfg);
  struct Job {
    std::size_t li, wi, rep;
  };
  std::vector<Job> jobs;
  for (std::size_t li = 0; li < cfg.lambda_grid.size(); ++li) {
    for (std::size_t wi = 0; wi < cfg.warmup_grid.size(); ++wi) {
      for (std::size_t r = 0; r < cfg.repetitions; ++r) jobs.push_back({li, wi, r});
    }
  }
  std::vector<ParetoPoint> points(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex report;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& j = jobs[i];
      points[i] = run_point(net_cfg, data, cfg.base, cfg.lambda_grid[j.li],
                            cfg.warmup_grid[j.wi],
                            sweep_point_seed(cfg.base_seed, j.li, j.wi, j.rep));
      if (on_point) {
        std::lock_guard lock(report);
        on_point(points[i]);
      }
    }
  };
  const std::size_t n_workers = std::clamp<std::size_t>(cfg.workers, 1, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  if (std::none_of(points.begin(), points.end(),
                   [](const ParetoPoint& p) { return p.status == PointStatus::ok; })) {
    throw Error("every sweep run failed; first error: " + points.front().error);
  }
  return points;
}

/// Indices of the non-dominated successful points, ascending by params.
/// Exact duplicates keep the first-seen point.
inline std::vector<std::size_t> pareto_front_indices(const std::vector<ParetoPoint>& points) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].status == PointStatus::ok) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].params != points[b].params) return points[a].params < points[b].params;
    return points[a].perf < points[b].perf;
  });
  std::vector<std::size_t> front;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i : order) {
    if (points[i].perf < best) {
      front.push_back(i);
      best = points[i].perf;
    }
  }
  return front;
}

inline std::vector<ParetoPoint> pareto_front(const std::vector<ParetoPoint>& points) {
  std::vector<ParetoPoint> out;
  for (std::size_t i : pareto_front_indices(points)) out.push_back(points[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Report: <dir>/sweep.csv and <dir>/summary.json

inline const char* kSweepHeader = "lambda,steps_wu,seed,params,perf,dilations,status";

inline void write_sweep_csv(const std::filesystem::path& path,
                            const std::vector<ParetoPoint>& points) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << kSweepHeader << '\n';
  for (const ParetoPoint& p : points) {
    out << format_number(p.lambda) << ',' << p.steps_wu << ',' << p.seed << ',' << p.params << ','
        << format_number(p.perf) << ',' << format_dilations(p.dilations) << ','
        << (p.status == PointStatus::ok ? "ok" : "failed") << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

inline std::vector<ParetoPoint> read_sweep_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kSweepHeader) {
    throw Error(path.string() + ": expected header '" + std::string(kSweepHeader) + "'");
  }
  std::vector<ParetoPoint> points;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 7) {
      throw Error(path.string() + ":" + std::to_string(row) + ": expected 7 fields");
    }
    try {
      ParetoPoint p;
      p.lambda = std::stod(cells[0]);
      p.steps_wu = std::stoull(cells[1]);
      p.seed = std::stoull(cells[2]);
      p.params = std::stoll(cells[3]);
      p.perf = std::stod(cells[4]);
      if (!cells[5].empty()) p.dilations = parse_dilation_tuple(cells[5]);
      if (cells[6] == "ok") {
        p.status = PointStatus::ok;
      } else if (cells[6] == "failed") {
        p.status = PointStatus::failed;
      } else {
        throw Error("unknown status '" + cells[6] + "'");
      }
      points.push_back(std::move(p));
    } catch (const std::logic_error&) {
      throw Error(path.string() + ":" + std::to_string(row) + ": malformed number");
    } catch (const Error& e) {
      throw Error(path.string() + ":" + std::to_string(row) + ": " + e.what());
    }
  }
  return points;
}

inline void emit_report(const std::vector<ParetoPoint>& points, const std::filesystem::path& dir,
                        double search_space = 0.0) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  const std::vector<std::size_t> front = pareto_front_indices(points);
  if (front.empty()) throw Error("emit_report: no successful point to report");
  write_sweep_csv(dir / "sweep.csv", points);

  nlohmann::json summary;
  summary["points"] = points.size();
  summary["failed"] = std::count_if(points.begin(), points.end(), [](const ParetoPoint& p) {
    return p.status == PointStatus::failed;
  });
  summary["front"] = front;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < points.size(); ++i) {
    const ParetoPoint& p = points[i];
    nlohmann::json r{{"lambda", p.lambda},     {"steps_wu", p.steps_wu},
                     {"seed", p.seed},         {"params", p.params},
                     {"dilations", p.dilations},
                     {"status", p.status == PointStatus::ok ? "ok" : "failed"},
                     {"on_front", std::find(front.begin(), front.end(), i) != front.end()}};
    r["perf"] = std::isfinite(p.perf) ? nlohmann::json(p.perf) : nlohmann::json();
    if (!p.error.empty()) r["error"] = p.error;
    rows.push_back(std::move(r));
  }
  summary["rows"] = std::move(rows);
  if (search_space > 0.0) summary["search_space_size"] = search_space;
  const auto path = dir / "summary.json";
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << summary.dump(2) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

}  // namespace pit
