#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "kvtrack/bench.hpp"
#include "oracles.hpp"

using namespace kvtrack;

namespace {

std::vector<BenchRow> planted(double c, double power) {
  std::vector<BenchRow> rows;
  for (std::size_t n : {8u, 16u, 32u, 64u}) {
    const double ms = c * std::pow(double(n), power);
    rows.push_back({n, kFullJoint, ms, 1000.0 / ms});
  }
  return rows;
}

}  // namespace

TEST(ClosedForms, ElementCountsAtFifty) {
  EXPECT_EQ(full_joint_score_elements(50, 20), 1000000u);
  EXPECT_EQ(cached_track_score_elements(50, 20), 20400u);
  EXPECT_NEAR(double(full_joint_score_elements(50, 20)) / double(cached_track_score_elements(50, 20)),
              49.0196, 1e-4);
  EXPECT_EQ(full_joint_score_macs(2, 3, 4), 144u);
  EXPECT_EQ(cached_track_score_macs(2, 3, 4), 108u);
}

TEST(MeasureScoreMacs, MatchesClosedForms) {
  std::mt19937_64 rng(1);
  const Aggregator agg({.num_layers = 4, .d_k = 8, .patch_size = 14, .num_register_tokens = 4, .seed = 2});
  for (std::size_t n : {2u, 5u, 8u}) {
    std::vector<TokenMatrix> kf;
    for (std::size_t i = 0; i < n; ++i) kf.push_back({i, oracle::random_matrix(rng, 20, 8), 16, 4, 4, 4});
    const TokenMatrix query{99, oracle::random_matrix(rng, 20, 8), 16, 4, 4, 4};
    const auto counts = measure_score_macs(agg, kf, query);
    EXPECT_EQ(counts.full_joint_per_layer, full_joint_score_macs(n, 20, 8));
    EXPECT_EQ(counts.cached_track_per_layer, cached_track_score_macs(n, 20, 8));
    EXPECT_EQ(counts.global_layers, 2u);
  }
}

TEST(FitComplexity, PlantedSlopes) {
  EXPECT_NEAR(fit_complexity(planted(0.3, 1.0)).at(kFullJoint), 1.0, 1e-6);
  EXPECT_NEAR(fit_complexity(planted(0.01, 2.0)).at(kFullJoint), 2.0, 1e-6);
}

TEST(FitComplexity, NeedsFourDistinctN) {
  auto rows = planted(1.0, 1.0);
  rows.pop_back();
  EXPECT_THROW(fit_complexity(rows), Error);
  rows.push_back(rows.back());
  EXPECT_THROW(fit_complexity(rows), Error);
}

TEST(Speedups, Ratio) {
  std::vector<BenchRow> rows = {{8, kFullJoint, 10.0, 100.0}, {8, kCachedTrack, 2.0, 500.0},
                                {16, kFullJoint, 40.0, 25.0}, {16, kCachedTrack, 4.0, 250.0}};
  const auto s = speedups(rows);
  EXPECT_DOUBLE_EQ(s.at(8), 5.0);
  EXPECT_DOUBLE_EQ(s.at(16), 10.0);
}

TEST(BenchCsv, HeaderAndRows) {
  BenchConfig cfg;
  std::vector<BenchRow> rows = {{8, kCachedTrack, 2.5, 400.0}};
  std::ostringstream out;
  write_bench_csv(out, rows, cfg);
  std::istringstream in(out.str());
  std::string comment, header, row;
  std::getline(in, comment);
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(comment.substr(0, 38), "# statistic=median repetitions=5 warmu");
  EXPECT_EQ(header, "n_keyframes,mode,ms_per_frame,fps");
  EXPECT_EQ(row, "8,cached_track,2.500000,400.000000");
}

TEST(BenchScaling, RowsForEveryPointAndMode) {
  BenchConfig cfg;
  cfg.width = cfg.height = 56;
  cfg.repetitions = 1;
  cfg.warmups = 0;
  const std::vector<std::size_t> ns = {1, 2, 3, 4};
  const auto rows = bench_scaling(ns, cfg);
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    EXPECT_GT(r.ms_per_frame, 0.0);
    EXPECT_NEAR(r.fps, 1000.0 / r.ms_per_frame, 1e-9);
  }
  EXPECT_EQ(fit_complexity(rows).size(), 2u);
  const std::vector<std::size_t> zero = {0};
  EXPECT_THROW(bench_scaling(zero, cfg), Error);
}

TEST(MedianMs, RunsWarmupsAndRepetitions) {
  int calls = 0;
  median_ms(2, 5, [&] { ++calls; });
  EXPECT_EQ(calls, 7);
}
