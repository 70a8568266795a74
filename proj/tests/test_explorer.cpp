#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace pit;
using test::Gen;

namespace {

ParetoPoint pt(std::int64_t params, double perf) {
  ParetoPoint p;
  p.params = params;
  p.perf = perf;
  return p;
}

// O(n^2) reference: successful points not dominated by any other, with
// exact duplicates collapsed to the first seen, sorted by params then perf.
std::vector<std::size_t> brute_force_front(const std::vector<ParetoPoint>& pts) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (pts[i].status != PointStatus::ok) continue;
    bool dominated = false;
    for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
      if (j == i || pts[j].status != PointStatus::ok) continue;
      const bool le = pts[j].params <= pts[i].params && pts[j].perf <= pts[i].perf;
      const bool strict = pts[j].params < pts[i].params || pts[j].perf < pts[i].perf;
      dominated = (le && strict) || (!strict && le && j < i);
    }
    if (!dominated) out.push_back(i);
  }
  std::stable_sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
    return pts[a].params < pts[b].params;
  });
  return out;
}

Dataset tiny_task() {
  return generate_teacher_dataset(test::regression_net(1, {test::conv_layer(1, 1, 3, 4)}), 80, 16,
                                  0.01, 3)
      .first;
}

SweepConfig tiny_sweep() {
  SweepConfig s;
  s.lambda_grid = {0.0};
  s.warmup_grid = {5};
  s.base.batch_size = 16;
  s.base.learning_rate = 1e-2;
  s.base.patience_epochs = 2;
  s.base.max_epochs = 4;
  s.base.steps_ft = 8;
  s.base_seed = 11;
  return s;
}

NetworkConfig tiny_net() { return test::regression_net(1, {test::pit_layer(1, 1, 9)}); }

}  // namespace

TEST(Pareto, DominatedPointDropped) {
  const auto f = pareto_front({pt(100, 1.0), pt(200, 0.5), pt(150, 1.2)});
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f[0].params, 100);
  EXPECT_EQ(f[1].params, 200);
}

TEST(Pareto, SingleAndDuplicates) {
  EXPECT_EQ(pareto_front({pt(5, 1.0)}).size(), 1u);
  std::vector<ParetoPoint> dup{pt(5, 1.0), pt(5, 1.0), pt(5, 1.0)};
  dup[0].seed = 1;
  dup[1].seed = 2;
  const auto f = pareto_front(dup);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].seed, 1u);
}

TEST(Pareto, FailedPointsExcluded) {
  std::vector<ParetoPoint> pts{pt(5, 1.0), pt(1, 0.0)};
  pts[1].status = PointStatus::failed;
  const auto f = pareto_front(pts);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_EQ(f[0].params, 5);
}

TEST(Pareto, MatchesBruteForceOracle) {
  Gen g(99);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = trial < 50 ? g.integer(1, 60) : 1000;
    std::vector<ParetoPoint> pts;
    for (int i = 0; i < n; ++i) {
      // coarse grids force ties on both axes
      pts.push_back(pt(g.integer(1, 30), g.integer(0, 20) / 4.0));
      if (g.integer(0, 30) == 0) pts.back().status = PointStatus::failed;
    }
    EXPECT_EQ(pareto_front_indices(pts), brute_force_front(pts)) << "trial " << trial;
  }
}

TEST(Pareto, FrontCoversEveryNonMember) {
  Gen g(7);
  std::vector<ParetoPoint> pts;
  for (int i = 0; i < 300; ++i) pts.push_back(pt(g.integer(1, 1000), g.real(0, 1)));
  const auto front = pareto_front_indices(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (std::find(front.begin(), front.end(), i) != front.end()) continue;
    bool covered = false;
    for (std::size_t j : front)
      covered = covered || (pts[j].params <= pts[i].params && pts[j].perf <= pts[i].perf);
    EXPECT_TRUE(covered);
  }
  for (std::size_t a : front)
    for (std::size_t b : front)
      if (a != b) {
        EXPECT_FALSE(pts[b].params <= pts[a].params && pts[b].perf <= pts[a].perf);
      }
}

TEST(DilationTuple, FormatAndParse) {
  EXPECT_EQ(format_dilations({4, 4, 8, 8, 16, 16, 32, 32}), "4|4|8|8|16|16|32|32");
  EXPECT_EQ(parse_dilation_tuple("(4, 4, 8, 8, 16, 16 32, 32)"),
            (std::vector<int>{4, 4, 8, 8, 16, 16, 32, 32}));
  EXPECT_EQ(parse_dilation_tuple("1|2|4"), (std::vector<int>{1, 2, 4}));
  EXPECT_THROW(parse_dilation_tuple("(3, 4)"), Error);
  EXPECT_THROW(parse_dilation_tuple("()"), Error);
  EXPECT_THROW(parse_dilation_tuple("4x"), Error);
}

TEST(Sweep, CardinalityAndOrder) {
  SweepConfig s = tiny_sweep();
  s.lambda_grid = {0.0, 1e-2};
  s.warmup_grid = {0, 5};
  s.repetitions = 2;
  s.workers = 2;
  const auto pts = run_sweep(s, tiny_net(), tiny_task());
  ASSERT_EQ(pts.size(), 8u);
  EXPECT_EQ(pts[0].lambda, 0.0);
  EXPECT_EQ(pts[7].lambda, 1e-2);
  EXPECT_EQ(pts[1].steps_wu, 0u);
  EXPECT_EQ(pts[2].steps_wu, 5u);
  EXPECT_NE(pts[0].seed, pts[1].seed);
}

TEST(Sweep, SinglePointEqualsDirectRun) {
  const SweepConfig s = tiny_sweep();
  const Dataset d = tiny_task();
  const auto pts = run_sweep(s, tiny_net(), d);
  ASSERT_EQ(pts.size(), 1u);
  const std::uint64_t seed = sweep_point_seed(s.base_seed, 0, 0, 0);
  TrainConfig c = s.base;
  c.lambda = 0.0;
  c.steps_wu = 5;
  c.rng_seed = seed;
  const auto r = run_pit(Network::build(tiny_net(), seed), d, c);
  EXPECT_EQ(pts[0].seed, seed);
  EXPECT_EQ(std::bit_cast<std::uint64_t>(pts[0].perf), std::bit_cast<std::uint64_t>(r.final_val_loss));
  EXPECT_EQ(pts[0].params, r.params);
  EXPECT_EQ(pts[0].dilations, r.dilations);
}

TEST(Sweep, WorkerCountDoesNotChangeResults) {
  SweepConfig s = tiny_sweep();
  s.lambda_grid = {0.0, 1e-3, 1e-1};
  const Dataset d = tiny_task();
  s.workers = 1;
  const auto a = run_sweep(s, tiny_net(), d);
  s.workers = 3;
  const auto b = run_sweep(s, tiny_net(), d);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i].perf), std::bit_cast<std::uint64_t>(b[i].perf));
    EXPECT_EQ(a[i].dilations, b[i].dilations);
  }
}

TEST(Sweep, FailedRunsRecordedAndAllFailedIsAnError) {
  Dataset bad = tiny_task();
  for (double& v : bad.inputs.values()) v *= 1e200;
  EXPECT_THROW(run_sweep(tiny_sweep(), tiny_net(), bad), Error);
  const ParetoPoint p = run_point(tiny_net(), bad, tiny_sweep().base, 0.0, 0, 1);
  EXPECT_EQ(p.status, PointStatus::failed);
  EXPECT_FALSE(p.error.empty());
}

TEST(Sweep, InvalidConfig) {
  SweepConfig s = tiny_sweep();
  s.lambda_grid.clear();
  EXPECT_THROW(run_sweep(s, tiny_net(), tiny_task()), Error);
  s = tiny_sweep();
  s.repetitions = 0;
  EXPECT_THROW(run_sweep(s, tiny_net(), tiny_task()), Error);
}

TEST(Report, TableAndSummary) {
  std::vector<ParetoPoint> pts{pt(100, 1.0), pt(200, 0.5), pt(150, 1.2)};
  pts[0].dilations = {4, 4, 8, 8, 16, 16, 32, 32};
  pts[1].lambda = 1e-6;
  pts[2].status = PointStatus::failed;
  pts[2].perf = std::nan("");
  const auto dir = test::scratch_dir("report");
  emit_report(pts, dir, 129600.0);
  std::ifstream csv(dir / "sweep.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "lambda,steps_wu,seed,params,perf,dilations,status");
  EXPECT_EQ(lines[1], "0,0,0,100,1,4|4|8|8|16|16|32|32,ok");
  EXPECT_EQ(lines[3].substr(lines[3].size() - 6), "failed");
  const auto summary = load_json(dir / "summary.json");
  EXPECT_EQ(summary["front"], nlohmann::json({0, 1}));
  EXPECT_TRUE(summary["rows"][1]["on_front"].get<bool>());
  EXPECT_FALSE(summary["rows"][2]["on_front"].get<bool>());
  EXPECT_EQ(summary["search_space_size"], 129600.0);

  const auto back = read_sweep_csv(dir / "sweep.csv");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[0].dilations, pts[0].dilations);
  EXPECT_EQ(back[1].lambda, 1e-6);
  EXPECT_EQ(back[2].status, PointStatus::failed);
  EXPECT_EQ(pareto_front_indices(back), pareto_front_indices(pts));
}

TEST(Report, NoSuccessfulPointIsAnError) {
  std::vector<ParetoPoint> pts{pt(1, 1.0)};
  pts[0].status = PointStatus::failed;
  EXPECT_THROW(emit_report(pts, test::scratch_dir("report_empty")), Error);
}

TEST(Report, UnwritablePathNamesIt) {
  const auto blocker = test::scratch_dir("report_block") / "file";
  std::ofstream(blocker) << "x";
  try {
    emit_report({pt(1, 1.0)}, blocker / "sub");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("file"), std::string::npos);
  }
}

TEST(Report, MalformedCsvRejected) {
  const auto dir = test::scratch_dir("report_bad");
  std::ofstream(dir / "a.csv") << "wrong,header\n";
  EXPECT_THROW(read_sweep_csv(dir / "a.csv"), Error);
  std::ofstream(dir / "b.csv") << "lambda,steps_wu,seed,params,perf,dilations,status\n1,2,3\n";
  EXPECT_THROW(read_sweep_csv(dir / "b.csv"), Error);
}
