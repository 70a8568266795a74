#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace pit;
using test::conv_layer;
using test::pit_layer;
using test::regression_net;

namespace {

Dataset small_teacher(std::size_t n = 120, double noise = 0.01) {
  return generate_teacher_dataset(regression_net(1, {conv_layer(1, 1, 3, 4)}), n, 24, noise, 9)
      .first;
}

NetworkConfig student() {
  return regression_net(1, {pit_layer(1, 2, 9, ActivationKind::relu), pit_layer(2, 1, 5)});
}

TrainConfig quick(double lambda = 1e-3) {
  TrainConfig c;
  c.steps_wu = 10;
  c.steps_ft = 15;
  c.lambda = lambda;
  c.batch_size = 16;
  c.learning_rate = 1e-2;
  c.patience_epochs = 2;
  c.max_epochs = 8;
  c.rng_seed = 4;
  return c;
}

std::vector<std::vector<double>> snapshot(Network& net) {
  std::vector<std::vector<double>> out;
  for (const ParamRef& p : net.parameters()) out.push_back(p.tensor->values());
  return out;
}

bool same_bits(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!bitwise_equal(a[i], b[i])) return false;
  return true;
}

std::vector<std::vector<double>> gammas(Network& net) {
  std::vector<std::vector<double>> out;
  for (auto* l : net.pit_layers()) out.push_back(l->gamma.g_hat.values());
  return out;
}

}  // namespace

TEST(Convergence, StillImprovingContinues) {
  ConvergenceTracker s;
  EXPECT_FALSE(check_convergence(s, 1.0, 2));
  EXPECT_FALSE(check_convergence(s, 0.9, 2));
  EXPECT_FALSE(check_convergence(s, 0.8, 2));
}

TEST(Convergence, StallStopsAfterPatience) {
  ConvergenceTracker s;
  EXPECT_FALSE(check_convergence(s, 0.8, 3));
  EXPECT_FALSE(check_convergence(s, 0.81, 3));
  EXPECT_FALSE(check_convergence(s, 0.81, 3));
  EXPECT_TRUE(check_convergence(s, 0.81, 3));
}

TEST(Convergence, LastMinuteImprovementResets) {
  ConvergenceTracker s;
  check_convergence(s, 0.8, 2);
  EXPECT_FALSE(check_convergence(s, 0.9, 2));
  EXPECT_FALSE(check_convergence(s, 0.7, 2));
  EXPECT_EQ(s.since_improvement, 0u);
  EXPECT_FALSE(check_convergence(s, 0.7, 2));
  EXPECT_TRUE(check_convergence(s, 0.7, 2));
}

TEST(TrainConfigTest, DefaultsAndValidation) {
  TrainConfig c;
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.patience_epochs, 50u);
  EXPECT_EQ(c.delta, 0.5);
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.patience_epochs = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(TrainConfigTest, JsonRoundTrip) {
  TrainConfig c = quick(3e-4);
  EXPECT_EQ(nlohmann::json(nlohmann::json(c).get<TrainConfig>()), nlohmann::json(c));
  c.steps_ft.reset();
  EXPECT_FALSE(nlohmann::json(c).get<TrainConfig>().steps_ft.has_value());
  EXPECT_THROW(nlohmann::json({{"lamda", 1.0}}).get<TrainConfig>(), Error);
}

TEST(BatchStreamTest, KeepsLastPartialBatch) {
  BatchStream s;
  s.rng = Rng(1);
  std::vector<std::size_t> sizes;
  std::vector<bool> ends;
  std::vector<std::size_t> seen;
  for (int i = 0; i < 3; ++i) {
    auto [idx, end] = s.next(10, 4);
    sizes.push_back(idx.size());
    ends.push_back(end);
    seen.insert(seen.end(), idx.begin(), idx.end());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_EQ(ends, (std::vector<bool>{false, false, true}));
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(seen[i], i);
  EXPECT_EQ(s.epoch, 1u);
}

TEST(Trainer, DefaultFineTuneBudgetIsTenEpochs) {
  const Dataset d = small_teacher();
  TrainConfig c = quick();
  c.steps_ft.reset();
  PitTrainer t(Network::build(student(), 1), d, c);
  EXPECT_EQ(t.steps_ft(), 10 * ((d.n_train + 15) / 16));
}

TEST(Trainer, WarmupRunsExactlyStepsWu) {
  const Dataset d = small_teacher();
  const auto r = run_pit(Network::build(student(), 1), d, quick());
  EXPECT_EQ(r.steps_warmup, 10u);
  EXPECT_LE(r.steps_finetune, 15u);
  EXPECT_GT(r.steps_pruning, 0u);
}

TEST(Trainer, PhaseIsolationAndGammaRange) {
  const Dataset d = small_teacher();
  PitTrainer t(Network::build(student(), 2), d, quick(1e-2));
  auto last = gammas(t.network());
  while (!t.run(1)) {
    const Phase phase = t.state().phase;
    const auto now = gammas(t.network());
    if (phase == Phase::warmup || phase == Phase::finetune) {
      // a step that ended pruning froze gammas but may have updated them
      if (t.state().phase_step > 0) EXPECT_TRUE(same_bits(now, last)) << phase_name(phase);
    }
    for (const auto& g : now) {
      EXPECT_EQ(g[0], 1.0);
      for (double v : g) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
    last = now;
  }
  EXPECT_TRUE(t.network().all_frozen());
}

TEST(Trainer, Deterministic) {
  const Dataset d = small_teacher();
  auto a = run_pit(Network::build(student(), 3), d, quick());
  auto b = run_pit(Network::build(student(), 3), d, quick());
  EXPECT_TRUE(same_bits(snapshot(a.net), snapshot(b.net)));
  EXPECT_EQ(a.history, b.history);
  EXPECT_EQ(a.dilations, b.dilations);
}

TEST(Trainer, HugeLambdaSaturates) {
  const Dataset d = small_teacher();
  TrainConfig c = quick(1e3);
  c.max_epochs = 20;
  const auto r = run_pit(Network::build(student(), 3), d, c);
  EXPECT_EQ(r.dilations, (std::vector<int>{8, 4}));
}

TEST(Trainer, EmptyValidationSplitIsAnError) {
  Dataset d = small_teacher();
  d.n_train += d.n_val;
  d.n_val = 0;
  EXPECT_THROW(PitTrainer(Network::build(student(), 1), d, quick()), Error);
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnosticCheckpoint) {
  Dataset d = small_teacher();
  for (double& v : d.inputs.values()) v *= 1e200;
  const auto dir = test::scratch_dir("diverge");
  try {
    run_pit(Network::build(student(), 1), d, quick(), dir);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find(dir.string()), std::string::npos);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
}

TEST(Checkpoint, ResumeMatchesUninterruptedAtEveryPhase) {
  const Dataset d = small_teacher();
  const TrainConfig c = quick(1e-2);
  PitTrainer full(Network::build(student(), 5), d, c);
  full.run();
  const auto want = snapshot(full.network());
  const auto total = full.state().step;
  for (std::size_t cut : {std::size_t{5}, std::size_t{10}, std::size_t{17}, total - 3}) {
    PitTrainer part(Network::build(student(), 5), d, c);
    part.run(cut);
    const auto dir = test::scratch_dir("ckpt_" + std::to_string(cut));
    part.save_checkpoint(dir);
    PitTrainer resumed = PitTrainer::resume(dir, d);
    EXPECT_EQ(resumed.state().phase, part.state().phase);
    resumed.run();
    EXPECT_TRUE(same_bits(snapshot(resumed.network()), want)) << "cut " << cut;
    EXPECT_EQ(resumed.state().history, full.state().history);
    EXPECT_EQ(resumed.state().step, total);
  }
}

TEST(Checkpoint, RejectsMismatchedDataset) {
  const Dataset d = small_teacher();
  PitTrainer t(Network::build(student(), 5), d, quick());
  t.run(3);
  const auto dir = test::scratch_dir("ckpt_mismatch");
  t.save_checkpoint(dir);
  EXPECT_THROW(PitTrainer::resume(dir, small_teacher(200)), Error);
  EXPECT_THROW(PitTrainer::resume(dir / "nope", d), Error);
}

TEST(TrainPlain, ZeroLambdaMatchesPlainTrainingOfSeed) {
  // full-rf teacher: every tap is useful, so gammas stay above threshold
  const Dataset d =
      generate_teacher_dataset(regression_net(1, {conv_layer(1, 1, 9, 1)}), 120, 24, 0.01, 2).first;
  TrainConfig c = quick(0.0);
  c.learning_rate = 1e-3;
  const auto r = run_pit(Network::build(student(), 6), d, c);
  EXPECT_EQ(r.dilations, (std::vector<int>{1, 1}));
  Network seed = Network::build(student(), 6);
  seed.freeze_gammas();
  Network plain = export_extracted(seed);
  train_plain(plain, d, c, r.steps_warmup + r.steps_pruning + r.steps_finetune);
  Network ex = export_extracted(r.net);
  EXPECT_TRUE(same_bits(snapshot(ex), snapshot(plain)));
  EXPECT_EQ(evaluate_loss(plain, d, Split::val), r.final_val_loss);
}
