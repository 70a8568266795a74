// pit: command-line driver for training, sweeps, export and data generation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pit/pit.hpp"

namespace fs = std::filesystem;
using namespace pit;

namespace {

void add_train_flags(CLI::App* cmd, TrainOverrides& o) {
  cmd->add_option("--steps-wu", o.steps_wu, "warmup steps");
  cmd->add_option("--steps-ft", o.steps_ft, "fine-tune step cap");
  cmd->add_option("--lambda", o.lambda, "size regularizer strength");
  cmd->add_option("--delta", o.delta, "binarization threshold");
  cmd->add_option("--batch-size", o.batch_size);
  cmd->add_option("--lr", o.learning_rate, "Adam learning rate");
  cmd->add_option("--patience", o.patience_epochs, "early stop patience in epochs");
  cmd->add_option("--seed", o.rng_seed);
  cmd->add_option("--max-epochs", o.max_epochs, "pruning epoch cap");
  cmd->add_option("--weight-decay", o.weight_decay);
}

nlohmann::json optional_json(const std::string& path) {
  return path.empty() ? nlohmann::json() : load_json(path);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json result_json(const TrainedResult& r, const TrainConfig& cfg) {
  return {{"dilations", r.dilations},
          {"params", r.params},
          {"final_val_loss", r.final_val_loss},
          {"steps", {{"warmup", r.steps_warmup},
                     {"pruning", r.steps_pruning},
                     {"finetune", r.steps_finetune}}},
          {"train_config", cfg}};
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      } else {
        out.push_back(static_cast<T>(std::stoll(item, &used)));
      }
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw Error(std::string("bad ") + what + " entry '" + item + "'");
    }
  }
  if (out.empty()) throw Error(std::string("empty ") + what + " list");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pruning In Time: differentiable dilation search for temporal conv nets"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "single pruning run from config files");
  std::string net_path, train_path, data_path, out_dir, resume_dir;
  TrainOverrides overrides;
  train->add_option("--config", net_path, "network config JSON");
  train->add_option("--train-config", train_path, "training config JSON");
  train->add_option("--data", data_path, "dataset file")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--resume", resume_dir, "checkpoint directory to continue from");
  add_train_flags(train, overrides);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "lambda x warmup grid search");
  std::string lambdas = "0", warmups = "0";
  std::size_t reps = 1, workers = 1;
  std::uint64_t base_seed = 0;
  sweep->add_option("--config", net_path, "network config JSON")->required();
  sweep->add_option("--train-config", train_path, "training config JSON");
  sweep->add_option("--data", data_path, "dataset file")->required();
  sweep->add_option("--out", out_dir, "report directory")->required();
  sweep->add_option("--lambdas", lambdas, "comma-separated lambda grid");
  sweep->add_option("--warmups", warmups, "comma-separated warmup step grid");
  sweep->add_option("--reps", reps, "repetitions per grid point");
  sweep->add_option("--base-seed", base_seed);
  sweep->add_option("--workers", workers, "worker threads");
  add_train_flags(sweep, overrides);

  // export
  auto* exp = app.add_subcommand("export", "write the extracted dilated model");
  std::string model_dir;
  exp->add_option("--model", model_dir, "model directory written by train")->required();
  exp->add_option("--out", out_dir, "output directory")->required();

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op");
  std::uint64_t grad_seed = 1;
  grad->add_option("--seed", grad_seed);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "synthetic dataset generators");
  std::string kind, teacher_path, periods = "4,16,48";
  std::size_t n = 1000, length = 64;
  double noise = 0.01;
  std::uint64_t data_seed = 0;
  gen->add_option("--kind", kind, "teacher or multiscale")
      ->required()
      ->check(CLI::IsMember({"teacher", "multiscale"}));
  gen->add_option("--teacher", teacher_path, "teacher network config JSON (kind=teacher)");
  gen->add_option("--periods", periods, "comma-separated periods (kind=multiscale)");
  gen->add_option("--n", n, "number of sequences");
  gen->add_option("--length", length, "time steps per sequence");
  gen->add_option("--noise", noise, "teacher target noise sigma, or multiscale noise");
  gen->add_option("--seed", data_seed);
  gen->add_option("--out", data_path, "dataset file")->required();

  // report
  auto* rep = app.add_subcommand("report", "recompute the front from a prior sweep table");
  std::string csv_path;
  rep->add_option("--sweep", csv_path, "sweep.csv from a previous run")->required();
  rep->add_option("--out", out_dir, "report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\nerror: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train) {
      const Dataset data = read_dataset(data_path);
      const fs::path out(out_dir);
      fs::create_directories(out);
      std::optional<PitTrainer> trainer;
      if (!resume_dir.empty()) {
        trainer.emplace(PitTrainer::resume(resume_dir, data));
      } else {
        if (net_path.empty()) throw Error("train needs --config or --resume");
        const TrainConfig cfg = resolve_train_config(optional_json(train_path), overrides);
        trainer.emplace(Network::build(load_network_config(net_path), cfg.rng_seed), data, cfg);
      }
      trainer->diagnostic_dir = out / "diagnostic";
      trainer->run();
      trainer->save_checkpoint(out / "checkpoint");
      TrainedResult r = trainer->result();
      write_model(out / "model", r.net);
      write_json(out / "result.json", result_json(r, trainer->config()));
      std::printf("dilations %s params %lld val_loss %s\n", format_dilations(r.dilations).c_str(),
                  static_cast<long long>(r.params), format_number(r.final_val_loss).c_str());
    } else if (*sweep) {
      const Dataset data = read_dataset(data_path);
      const NetworkConfig net = load_network_config(net_path);
      SweepConfig s;
      s.lambda_grid = parse_list<double>(lambdas, "lambda");
      s.warmup_grid = parse_list<std::size_t>(warmups, "warmup");
      s.repetitions = reps;
      s.workers = workers;
      s.base_seed = base_seed;
      s.base = resolve_train_config(optional_json(train_path), overrides);
      const auto points = run_sweep(s, net, data, [](const ParetoPoint& p) {
        std::printf("lambda %s wu %zu params %lld perf %s d %s %s\n",
                    format_number(p.lambda).c_str(), p.steps_wu,
                    static_cast<long long>(p.params), format_number(p.perf).c_str(),
                    format_dilations(p.dilations).c_str(),
                    p.status == PointStatus::ok ? "ok" : p.error.c_str());
        std::fflush(stdout);
      });
      emit_report(points, out_dir, search_space_size(net));
      std::printf("front %zu of %zu points\n", pareto_front_indices(points).size(), points.size());
    } else if (*exp) {
      Network net = read_model(model_dir);
      net.freeze_gammas();
      Network ex = export_extracted(net);
      write_model(out_dir, ex);
      std::printf("dilations %s params %lld\n", format_dilations(net.dilations()).c_str(),
                  static_cast<long long>(count_params(ex)));
    } else if (*grad) {
      bool ok = true;
      for (const GradCheckResult& r : run_gradient_suite(grad_seed)) {
        std::printf("%-24s %.3e %s\n", r.name.c_str(), r.max_rel_error, r.passed ? "ok" : "FAIL");
        ok = ok && r.passed;
      }
      return ok ? 0 : 1;
    } else if (*gen) {
      if (kind == "teacher") {
        if (teacher_path.empty()) throw Error("--kind teacher needs --teacher");
        auto [data, manifest] =
            generate_teacher_dataset(load_network_config(teacher_path), n, length, noise, data_seed);
        write_dataset(data_path, data);
        write_json(fs::path(data_path).concat(".teacher.json"), to_json(manifest));
      } else {
        MultiscaleOptions opt;
        if (gen->count("--noise")) opt.noise_sigma = noise;
        write_dataset(data_path, generate_multiscale_dataset(parse_list<int>(periods, "period"), n,
                                                             length, data_seed, opt));
      }
    } else if (*rep) {
      const auto points = read_sweep_csv(csv_path);
      emit_report(points, out_dir);
      std::printf("front %zu of %zu points\n", pareto_front_indices(points).size(), points.size());
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
