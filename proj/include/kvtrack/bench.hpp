#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "kvtrack/aggregator.hpp"
#include "kvtrack/heads.hpp"
#include "kvtrack/io.hpp"
#include "kvtrack/kv_cache.hpp"

namespace kvtrack {

inline constexpr const char* kFullJoint = "full_joint";
inline constexpr const char* kCachedTrack = "cached_track";

/// One timing row. For full_joint, ms_per_frame is the wall time of the full
/// bidirectional pass over the N frames, i.e. what it costs to obtain a new
/// frame's estimate by recomputing everything; for cached_track it is one
/// query frame against an N-keyframe cache.
struct BenchRow {
  std::size_t n_keyframes = 0;
  std::string mode;
  double ms_per_frame = 0.0;
  double fps = 0.0;
};

struct BenchConfig {
  AggregatorConfig aggregator{.num_layers = 4, .d_k = 32, .patch_size = 14,
                              .num_register_tokens = 4, .seed = 7};
  std::size_t width = 112;
  std::size_t height = 112;
  std::size_t repetitions = 5;
  std::size_t warmups = 2;
};

// Closed-form multiply-accumulate counts of Q K^T in one global layer, with
// T = M + R tokens per frame.
constexpr std::uint64_t full_joint_score_macs(std::uint64_t n, std::uint64_t t,
                                              std::uint64_t d_k) {
  return (n * t) * (n * t) * d_k;
}
constexpr std::uint64_t cached_track_score_macs(std::uint64_t n, std::uint64_t t,
                                                std::uint64_t d_k) {
  return t * t * (n + 1) * d_k;
}
constexpr std::uint64_t full_joint_score_elements(std::uint64_t n, std::uint64_t t) {
  return (n * t) * (n * t);
}
constexpr std::uint64_t cached_track_score_elements(std::uint64_t n, std::uint64_t t) {
  return t * t * (n + 1);
}

template <typename F>
double median_ms(std::size_t warmups, std::size_t reps, F&& body) {
  for (std::size_t i = 0; i < warmups; ++i) body();
  std::vector<double> samples;
  samples.reserve(reps);
  for (std::size_t i = 0; i < std::max<std::size_t>(reps, 1); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(samples.begin(), samples.end());
  const std::size_t m = samples.size() / 2;
  return samples.size() % 2 ? samples[m] : 0.5 * (samples[m - 1] + samples[m]);
}

inline std::vector<Frame> bench_frames(const BenchConfig& cfg, std::size_t count) {
  OrbitParams orbit;
  orbit.frame_count = count;
  orbit.angular_step = 2.0 * std::numbers::pi / static_cast<double>(std::max<std::size_t>(count, 1));
  orbit.width = cfg.width;
  orbit.height = cfg.height;
  orbit.elevation = 0.3;
  return synth_orbit(orbit).frames;
}

/// Times both modes for every n. Cache construction for cached_track happens
/// outside the timed region.
inline std::vector<BenchRow> bench_scaling(std::span<const std::size_t> n_values,
                                           const BenchConfig& cfg) {
  const Aggregator aggregator(cfg.aggregator);
  const DecoderHeads heads(cfg.aggregator);
  std::size_t max_n = 0;
  for (auto n : n_values) max_n = std::max(max_n, n);
  const auto frames = bench_frames(cfg, max_n + 1);
  const Image& query_image = frames.back().image;

  std::vector<BenchRow> rows;
  for (const std::size_t n : n_values) {
    if (n == 0) throw Error("bench: n must be positive");
    std::vector<TokenMatrix> keyframes;
    for (std::size_t i = 0; i < n; ++i) {
      keyframes.push_back(aggregator.encode_frame(frames[i].image, frames[i].frame_id));
    }

    const double full_ms = median_ms(cfg.warmups, cfg.repetitions, [&] {
      std::vector<TokenMatrix> batch;
      batch.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        batch.push_back(aggregator.encode_frame(frames[i].image, frames[i].frame_id));
      }
      const auto out = aggregator.forward(batch, Bidirectional{});
      volatile double sink = heads.decode_pose(out.frames.back()).translation.x();
      (void)sink;
    });
    rows.push_back({n, kFullJoint, full_ms, 1000.0 / full_ms});

    const KvCache cache = build_cache(keyframes, aggregator).cache;
    const double cached_ms = median_ms(cfg.warmups, cfg.repetitions, [&] {
      const auto query = aggregator.encode_frame(query_image, max_n);
      const auto out = attend_with_cache(query, cache, aggregator);
      volatile double sink = heads.decode_pose(out.tokens).translation.x();
      (void)sink;
    });
    rows.push_back({n, kCachedTrack, cached_ms, 1000.0 / cached_ms});
  }
  return rows;
}

/// Least-squares slope of log(ms) against log(n), per mode.
inline std::map<std::string, double> fit_complexity(std::span<const BenchRow> rows) {
  std::map<std::string, std::vector<std::pair<double, double>>> by_mode;
  for (const auto& r : rows) {
    if (!(r.ms_per_frame > 0.0) || r.n_keyframes == 0) {
      throw Error("fit_complexity: rows need positive n and time");
    }
    by_mode[r.mode].emplace_back(std::log(static_cast<double>(r.n_keyframes)),
                                 std::log(r.ms_per_frame));
  }
  std::map<std::string, double> slopes;
  for (const auto& [mode, pts] : by_mode) {
    std::set<double> distinct;
    for (const auto& p : pts) distinct.insert(p.first);
    if (distinct.size() < 4) {
      throw Error("fit_complexity: mode " + mode + " has " + std::to_string(distinct.size()) +
                  " distinct n values, need at least 4");
    }
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : pts) {
      mx += x;
      my += y;
    }
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    double sxy = 0.0, sxx = 0.0;
    for (const auto& [x, y] : pts) {
      sxy += (x - mx) * (y - my);
      sxx += (x - mx) * (x - mx);
    }
    slopes[mode] = sxy / sxx;
  }
  return slopes;
}

/// full_joint time divided by cached_track time for each n present in both.
inline std::map<std::size_t, double> speedups(std::span<const BenchRow> rows) {
  std::map<std::size_t, double> full, cached, out;
  for (const auto& r : rows) (r.mode == kFullJoint ? full : cached)[r.n_keyframes] = r.ms_per_frame;
  for (const auto& [n, ms] : full) {
    if (auto it = cached.find(n); it != cached.end()) out[n] = ms / it->second;
  }
  return out;
}

inline void write_bench_csv(std::ostream& out, std::span<const BenchRow> rows,
                            const BenchConfig& cfg) {
  out << "# statistic=median repetitions=" << cfg.repetitions << " warmups=" << cfg.warmups
      << " resolution=" << cfg.width << "x" << cfg.height << " d_k=" << cfg.aggregator.d_k
      << " num_layers=" << cfg.aggregator.num_layers << "\n";
  out << "n_keyframes,mode,ms_per_frame,fps\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.6f,%.6f\n", r.n_keyframes, r.mode.c_str(),
                  r.ms_per_frame, r.fps);
    out << buf;
  }
}

struct OpCounts {
  std::uint64_t full_joint_per_layer = 0;
  std::uint64_t cached_track_per_layer = 0;
  std::size_t global_layers = 0;
};

/// Runs both modes once with instrumented counters and returns the measured
/// global-attention score MACs of the first global layer (every global layer
/// does the same amount of work).
inline OpCounts measure_score_macs(const Aggregator& aggregator,
                                   std::span<const TokenMatrix> keyframes,
                                   const TokenMatrix& query) {
  OpCounter full;
  aggregator.forward(keyframes, Bidirectional{}, {.counter = &full});
  const KvCache cache = build_cache(keyframes, aggregator).cache;
  OpCounter cached;
  attend_with_cache(query, cache, aggregator, {.counter = &cached});
  for (std::size_t g = 1; g < full.global_score_macs.size(); ++g) {
    if (full.global_score_macs[g] != full.global_score_macs[0] ||
        cached.global_score_macs[g] != cached.global_score_macs[0]) {
      throw Error("global layers disagree on score MAC counts");
    }
  }
  return {full.global_score_macs.at(0), cached.global_score_macs.at(0),
          full.global_score_macs.size()};
}

}  // namespace kvtrack
