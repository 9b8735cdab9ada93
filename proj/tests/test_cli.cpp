#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "kvtrack/tracker.hpp"
#include "temp_dir.hpp"

using namespace kvtrack;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(KVTRACK_CLI) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(run("synth --out " + (dir / "seq").string() + " --frames 12 --step-deg 15", dir / "synth.log"), 0)
        << slurp(dir / "synth.log");
  }
  fs::path manifest() const { return dir / "seq" / "manifest.txt"; }
  TempDir dir;
};

}  // namespace

TEST_F(Cli, SynthWritesSequence) {
  const auto m = load_manifest(manifest());
  EXPECT_EQ(m.entries.size(), 12u);
  EXPECT_TRUE(fs::exists(dir / "seq" / "groundtruth.txt"));
}

TEST_F(Cli, ReplayRunsAreByteIdentical) {
  const std::string common = " --manifest " + manifest().string() + " --stride 4 --heads all --replay";
  for (const char* tag : {"a", "b"}) {
    const std::string t = tag;
    ASSERT_EQ(run("track" + common + " --trajectory " + (dir / (t + ".txt")).string() + " --ply " +
                      (dir / (t + ".ply")).string() + " --log " + (dir / (t + ".csv")).string(),
                  dir / "track.log"),
              0)
        << slurp(dir / "track.log");
  }
  EXPECT_EQ(slurp(dir / "a.txt"), slurp(dir / "b.txt"));
  EXPECT_EQ(slurp(dir / "a.ply"), slurp(dir / "b.ply"));
  EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
  EXPECT_EQ(load_tum(dir / "a.txt").size(), 12u);
  EXPECT_EQ(slurp(dir / "a.ply").substr(0, 4), "ply\n");
}

TEST_F(Cli, MapThenTrackWithCacheMatchesInProcess) {
  const auto cache_path = dir / "scene.kvc";
  ASSERT_EQ(run("map --manifest " + manifest().string() + " --stride 3 --replay --out " +
                    cache_path.string(),
                dir / "map.log"),
            0)
      << slurp(dir / "map.log");
  ASSERT_EQ(run("track --manifest " + manifest().string() + " --cache " + cache_path.string() +
                    " --trajectory " + (dir / "cli.txt").string(),
                dir / "track.log"),
            0)
      << slurp(dir / "track.log");

  PipelineConfig cfg;
  cfg.set("stride", "3");
  const Tracker tracker(cfg);
  ManifestSource mapping(load_manifest(manifest()));
  const auto mapped = tracker.run_stream(mapping);
  const auto loaded = load_cache(cache_path);
  EXPECT_EQ(content_hash(loaded), content_hash(*mapped.cache));
  EXPECT_EQ(loaded.generation, mapped.cache->generation);
  ManifestSource tracking(load_manifest(manifest()));
  const auto res = tracker.localize(tracking, mapped.cache);
  std::ostringstream expected;
  write_tum(expected, res.trajectory);
  EXPECT_EQ(slurp(dir / "cli.txt"), expected.str());
}

TEST_F(Cli, EvalIdenticalFilesGivesZero) {
  const auto gt = (dir / "seq" / "groundtruth.txt").string();
  ASSERT_EQ(run("eval --est " + gt + " --gt " + gt + " --csv " + (dir / "r.csv").string(), dir / "eval.log"), 0);
  const auto out = slurp(dir / "eval.log");
  EXPECT_NE(out.find("ate_rmse=0.000000000"), std::string::npos) << out;
  EXPECT_NE(out.find("recall_1cm_1deg=1.000000"), std::string::npos) << out;
  EXPECT_EQ(slurp(dir / "r.csv").substr(0, 13), "metric,value\n");
}

TEST_F(Cli, ErrorsExitNonzeroWithOneLine) {
  std::ofstream(dir / "empty.txt") << "# no frames\n";
  EXPECT_NE(run("track --manifest " + (dir / "empty.txt").string(), dir / "e1.log"), 0);
  const auto msg = slurp(dir / "e1.log");
  EXPECT_EQ(msg.rfind("kvtrack: error: ", 0), 0u) << msg;
  EXPECT_EQ(std::count(msg.begin(), msg.end(), '\n'), 1);

  EXPECT_NE(run("track --manifest " + manifest().string() + " --resolution 224x224", dir / "e2.log"), 0);
  EXPECT_NE(run("map --manifest " + manifest().string() + " --out " + (dir / "x").string() +
                    " --policy sideways",
                dir / "e3.log"),
            0);
  EXPECT_NE(run("track --manifest " + manifest().string() + " --cache " + (dir / "nope.kvc").string(),
                dir / "e4.log"),
            0);
  EXPECT_NE(run("frobnicate", dir / "e5.log"), 0);
}

TEST_F(Cli, AngularPolicyAndLiveMode) {
  ASSERT_EQ(run("track --manifest " + manifest().string() + " --policy angular --tau-deg 20 --trajectory " +
                    (dir / "live.txt").string(),
                dir / "live.log"),
            0)
      << slurp(dir / "live.log");
  EXPECT_EQ(load_tum(dir / "live.txt").size(), 12u);
}

TEST_F(Cli, BenchWritesCsv) {
  ASSERT_EQ(run("bench --out " + (dir / "bench.csv").string() +
                    " --n 1,2,3,4 --reps 1 --warmups 0 --resolution 56x56",
                dir / "bench.log"),
            0)
      << slurp(dir / "bench.log");
  const auto csv = slurp(dir / "bench.csv");
  EXPECT_NE(csv.find("n_keyframes,mode,ms_per_frame,fps\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
  EXPECT_NE(slurp(dir / "bench.log").find("slope_cached_track="), std::string::npos);
}
