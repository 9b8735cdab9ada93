// kvtrack command-line entry point: synth, map, track, bench, eval.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kvtrack/kvtrack.hpp"

namespace fs = std::filesystem;
using namespace kvtrack;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string seed;
  std::string resolution;
  std::string policy;
  std::string tau_deg;
  std::string stride;
  std::string heads;
  bool replay = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value pipeline config file");
  cmd->add_option("--seed", f.seed, "weight seed");
  cmd->add_option("--resolution", f.resolution, "input resolution WxH");
  cmd->add_option("--policy", f.policy, "keyframe policy: interval | angular");
  cmd->add_option("--tau-deg", f.tau_deg, "angular keyframe threshold in degrees");
  cmd->add_option("--stride", f.stride, "fixed keyframe interval in frames");
  cmd->add_option("--heads", f.heads, "decoder heads while tracking: pose | all | pose,points,...");
  cmd->add_flag("--replay", f.replay, "deterministic single-worker interleaving");
}

PipelineConfig resolve_config(const CommonFlags& f) {
  PipelineConfig cfg;
  if (!f.config_path.empty()) cfg = load_config(f.config_path);
  if (!f.seed.empty()) cfg.set("seed", f.seed);
  if (!f.resolution.empty()) cfg.set("resolution", f.resolution);
  if (!f.policy.empty()) cfg.set("policy", f.policy);
  if (!f.stride.empty()) cfg.set("stride", f.stride);
  if (!f.tau_deg.empty()) cfg.set("tau_deg", f.tau_deg);
  if (!f.heads.empty()) cfg.set("heads", f.heads);
  cfg.validate();
  return cfg;
}

StreamOptions stream_options(const CommonFlags& f) {
  StreamOptions opts;
  opts.replay = f.replay;
  return opts;
}

SequenceManifest open_manifest(const std::string& path, const PipelineConfig& cfg) {
  auto manifest = load_manifest(path);
  if (cfg.resolution && manifest.resolution && !(*cfg.resolution == *manifest.resolution)) {
    throw Error("manifest frames are " + format_resolution(*manifest.resolution) +
                " but the configured resolution is " + format_resolution(*cfg.resolution));
  }
  cfg.aggregator.validate_resolution(manifest.resolution->width, manifest.resolution->height);
  return manifest;
}

void write_log(const fs::path& path, const StreamResult& res) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_insertion_log(out, res.log);
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(trim(item)));
  if (out.empty()) throw Error("empty list '" + text + "'");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvtrack: keyframe mapping and cached-attention tracking"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "write a synthetic orbit sequence");
  std::string synth_out;
  std::size_t synth_frames = 36;
  double synth_step = 10.0;
  double synth_radius = 1.0;
  double synth_elevation = 20.0;
  std::string synth_res = "56x56";
  bool synth_masks = false;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--frames", synth_frames, "frame count");
  synth->add_option("--step-deg", synth_step, "azimuth step per frame, degrees");
  synth->add_option("--radius", synth_radius, "orbit radius");
  synth->add_option("--elevation-deg", synth_elevation, "orbit elevation, degrees");
  synth->add_option("--resolution", synth_res, "frame resolution WxH");
  synth->add_flag("--masks", synth_masks, "also write object masks");

  // map
  CommonFlags map_flags;
  auto* map = app.add_subcommand("map", "select keyframes from a sequence and save the cache");
  std::string map_manifest, map_out, map_log;
  map->add_option("--manifest", map_manifest, "sequence manifest")->required();
  map->add_option("--out", map_out, "cache file to write")->required();
  map->add_option("--log", map_log, "keyframe insertion log (CSV)");
  add_common(map, map_flags);

  // track
  CommonFlags track_flags;
  auto* track = app.add_subcommand("track", "track a sequence, write trajectory and point cloud");
  std::string track_manifest, track_cache, track_traj = "trajectory.txt", track_ply, track_log;
  track->add_option("--manifest", track_manifest, "sequence manifest")->required();
  track->add_option("--cache", track_cache, "pre-built cache; disables keyframe insertion");
  track->add_option("--trajectory", track_traj, "TUM trajectory output");
  track->add_option("--ply", track_ply, "fused point cloud output (ASCII PLY)");
  track->add_option("--log", track_log, "keyframe insertion log (CSV)");
  add_common(track, track_flags);

  // bench
  auto* bench = app.add_subcommand("bench", "full-joint vs cached-track scaling benchmark");
  std::string bench_out = "bench.csv", bench_n = "8,16,32,64", bench_res = "112x112";
  BenchConfig bench_cfg;
  bench->add_option("--out", bench_out, "CSV output");
  bench->add_option("--n", bench_n, "comma-separated keyframe counts");
  bench->add_option("--reps", bench_cfg.repetitions, "timed repetitions per point");
  bench->add_option("--warmups", bench_cfg.warmups, "untimed warmup runs per point");
  bench->add_option("--resolution", bench_res, "frame resolution WxH");
  bench->add_option("--seed", bench_cfg.aggregator.seed, "weight seed");

  // eval
  auto* eval = app.add_subcommand("eval", "ATE and pose recall between two TUM trajectories");
  std::string eval_est, eval_gt, eval_report, eval_csv;
  eval->add_option("--est", eval_est, "estimated trajectory")->required();
  eval->add_option("--gt", eval_gt, "ground-truth trajectory")->required();
  eval->add_option("--report", eval_report, "key=value report file (default: stdout)");
  eval->add_option("--csv", eval_csv, "CSV report file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      OrbitParams p;
      p.frame_count = synth_frames;
      p.angular_step = deg2rad(synth_step);
      p.radius = synth_radius;
      p.elevation = deg2rad(synth_elevation);
      const auto r = parse_resolution(synth_res);
      p.width = r.width;
      p.height = r.height;
      p.cube_half_size = 0.25 * synth_radius;
      p.with_masks = synth_masks;
      const auto manifest = write_sequence(synth_out, synth_orbit(p));
      std::cout << manifest.string() << "\n";
    } else if (*map) {
      const auto cfg = resolve_config(map_flags);
      ManifestSource source(open_manifest(map_manifest, cfg));
      const Tracker tracker(cfg);
      const auto res = tracker.run_stream(source, stream_options(map_flags));
      save_cache(map_out, *res.cache);
      write_log(map_log.empty() ? cfg.log_path : fs::path(map_log), res);
      std::printf("keyframes=%zu generation=%llu bytes=%zu\n", res.keyframes.size(),
                  static_cast<unsigned long long>(res.cache->generation),
                  memory_footprint(*res.cache));
    } else if (*track) {
      const auto cfg = resolve_config(track_flags);
      ManifestSource source(open_manifest(track_manifest, cfg));
      const Tracker tracker(cfg);
      StreamResult res;
      if (!track_cache.empty()) {
        res = tracker.localize(source, std::make_shared<const KvCache>(load_cache(track_cache)));
      } else {
        res = tracker.run_stream(source, stream_options(track_flags));
      }
      const fs::path traj = cfg.trajectory_path.empty() ? fs::path(track_traj) : cfg.trajectory_path;
      save_tum(traj, res.trajectory);
      const fs::path ply = track_ply.empty() ? cfg.ply_path : fs::path(track_ply);
      if (!ply.empty()) save_ply(ply, res.cloud);
      write_log(track_log.empty() ? cfg.log_path : fs::path(track_log), res);
      std::printf("frames=%zu keyframes=%zu final_generation=%llu\n", res.trajectory.size(),
                  res.keyframes.size(),
                  static_cast<unsigned long long>(res.generations.empty() ? 0 : res.generations.back()));
    } else if (*bench) {
      const auto r = parse_resolution(bench_res);
      bench_cfg.width = r.width;
      bench_cfg.height = r.height;
      bench_cfg.aggregator.validate_resolution(r.width, r.height);
      const auto ns = parse_list(bench_n);
      const auto rows = bench_scaling(ns, bench_cfg);
      std::ofstream out(bench_out);
      if (!out) throw Error("cannot write " + bench_out);
      write_bench_csv(out, rows, bench_cfg);
      if (ns.size() >= 4) {
        for (const auto& [mode, slope] : fit_complexity(rows)) {
          std::printf("slope_%s=%.3f\n", mode.c_str(), slope);
        }
      }
    } else if (*eval) {
      const auto rep = evaluate(load_tum(eval_est), load_tum(eval_gt));
      if (eval_report.empty()) {
        write_report(std::cout, rep);
      } else {
        std::ofstream out(eval_report);
        if (!out) throw Error("cannot write " + eval_report);
        write_report(out, rep);
      }
      if (!eval_csv.empty()) {
        std::ofstream out(eval_csv);
        if (!out) throw Error("cannot write " + eval_csv);
        write_report_csv(out, rep);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "kvtrack: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
