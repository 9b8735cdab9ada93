#pragma once

#include <array>
#include <atomic>
#include <cstdio>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <thread>
#include <vector>

#include "kvtrack/aggregator.hpp"
#include "kvtrack/concurrency.hpp"
#include "kvtrack/evaluation.hpp"
#include "kvtrack/heads.hpp"
#include "kvtrack/io.hpp"
#include "kvtrack/keyframe.hpp"
#include "kvtrack/kv_cache.hpp"

namespace kvtrack {

struct PointCloud {
  std::vector<std::array<float, 3>> xyz;
  std::vector<std::array<std::uint8_t, 3>> rgb;

  std::size_t size() const noexcept { return xyz.size(); }
};

/// Transforms every local point whose confidence is >= `confidence_floor`
/// into the world frame with its keyframe's pose, colored by its source pixel.
inline PointCloud fuse_pointmaps(std::span<const Keyframe> keyframes, double confidence_floor) {
  PointCloud cloud;
  for (const auto& kf : keyframes) {
    if (!kf.points) continue;
    const auto& pm = *kf.points;
    for (std::size_t y = 0; y < pm.height; ++y) {
      for (std::size_t x = 0; x < pm.width; ++x) {
        const double c = kf.confidence ? kf.confidence->at(x, y) : 1.0;
        if (c < confidence_floor) continue;
        const Vec3 w = kf.pose.apply(pm.at(x, y));
        cloud.xyz.push_back({static_cast<float>(w.x()), static_cast<float>(w.y()),
                             static_cast<float>(w.z())});
        std::array<std::uint8_t, 3> color{0, 0, 0};
        if (kf.image && x < kf.image->width && y < kf.image->height) {
          const auto* px = kf.image->pixel(x, y);
          color = {px[0], px[1], px[2]};
        }
        cloud.rgb.push_back(color);
      }
    }
  }
  return cloud;
}

inline void write_ply(std::ostream& out, const PointCloud& cloud) {
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty float x\nproperty float y\nproperty float z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  char buf[128];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.xyz[i];
    const auto& c = cloud.rgb[i];
    std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f %u %u %u\n", p[0], p[1], p[2], c[0], c[1],
                  c[2]);
    out << buf;
  }
}

inline void save_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write point cloud " + path.string());
  write_ply(out, cloud);
}

struct TrackResult {
  Pose pose;      // gauge-fixed: relative to the first keyframe
  Pose raw_pose;  // pose head output
  std::optional<PointMap> points;
  std::optional<ConfidenceMap> confidence;
  std::uint64_t generation = 0;
  TokenMatrix tokens;  // aggregated query tokens
};

struct StreamOptions {
  /// Deterministic single-worker interleaving. When false, mapping runs on
  /// its own worker and frames are decoded by a producer stage.
  bool replay = true;
  /// Poses used for view angles, looked up by timestamp. Defaults to the
  /// tracker's own estimates.
  const Trajectory* angle_reference = nullptr;
  /// Replaces the predicted mean confidence of a keyframe candidate.
  std::function<std::optional<double>(std::uint64_t frame_id)> confidence_override;
  std::size_t frame_queue_capacity = 8;
};

struct StreamResult {
  Trajectory trajectory;
  std::vector<std::uint64_t> frame_ids;
  std::vector<std::uint64_t> generations;  // cache generation each frame consumed
  std::vector<Keyframe> keyframes;
  PointCloud cloud;
  std::vector<InsertionLogEntry> log;
  CachePtr cache;
};

/// Mapping (keyframes -> cache) and tracking (frame + cache -> pose). The
/// aggregator and heads are immutable, so one Tracker may be shared by the
/// mapping and tracking workers.
class Tracker {
 public:
  explicit Tracker(PipelineConfig config)
      : config_(std::move(config)), aggregator_(config_.aggregator), heads_(config_.aggregator) {
    config_.validate();
  }

  const PipelineConfig& config() const noexcept { return config_; }
  const Aggregator& aggregator() const noexcept { return aggregator_; }
  const DecoderHeads& heads() const noexcept { return heads_; }

  Keyframe make_keyframe(const Frame& frame) const {
    Keyframe kf;
    kf.frame_id = frame.frame_id;
    kf.timestamp = frame.timestamp;
    kf.image = std::make_shared<const Image>(frame.image);
    kf.tokens = aggregator_.encode_frame(frame.image, frame.frame_id);
    return kf;
  }

  /// Builds the cache over `buffer` and decodes every head for every
  /// keyframe, storing pose, geometry and mean confidence on the records.
  /// Poses are expressed relative to the first keyframe. The returned cache
  /// is unpublished (generation 0).
  KvCache map_keyframes(std::vector<Keyframe>& buffer, OpCounter* counter = nullptr) const {
    if (buffer.empty()) throw Error("cannot map an empty keyframe buffer");
    std::vector<TokenMatrix> tokens;
    tokens.reserve(buffer.size());
    for (const auto& kf : buffer) tokens.push_back(kf.tokens);
    auto built = build_cache(tokens, aggregator_, counter);
    for (std::size_t i = 0; i < buffer.size(); ++i) {
      auto out = heads_.decode(built.final_tokens[i], HeadConfig::all());
      if (i == 0) built.cache.gauge = out.pose;
      buffer[i].pose = i == 0 ? Pose::identity() : relative_to(built.cache.gauge, out.pose);
      buffer[i].mean_confidence = out.confidence->mean();
      buffer[i].points = std::move(out.points);
      buffer[i].confidence = std::move(out.confidence);
    }
    return std::move(built.cache);
  }

  TrackResult track_frame(const Image& image, const Mask* mask, const KvCache& cache,
                          const HeadConfig& heads, std::uint64_t frame_id = 0,
                          const ForwardOptions& options = {}) const {
    if (mask) {
      return track_tokens(aggregator_.encode_frame(apply_mask(image, *mask), frame_id), cache,
                          heads, options);
    }
    return track_tokens(aggregator_.encode_frame(image, frame_id), cache, heads, options);
  }

  TrackResult track_tokens(const TokenMatrix& query, const KvCache& cache,
                           const HeadConfig& heads, const ForwardOptions& options = {}) const {
    auto attended = attend_with_cache(query, cache, aggregator_, options);
    auto out = heads_.decode(attended.tokens, heads);
    TrackResult r;
    r.raw_pose = out.pose;
    r.pose = relative_to(cache.gauge, out.pose);
    r.points = std::move(out.points);
    r.confidence = std::move(out.confidence);
    r.generation = cache.generation;
    r.tokens = std::move(attended.tokens);
    return r;
  }

  /// Tracks every frame against a fixed cache without inserting keyframes.
  StreamResult localize(FrameSource& source, CachePtr cache) const {
    if (!cache) throw Error("map before track: no cache");
    StreamResult res;
    res.cache = cache;
    std::size_t count = 0;
    while (auto frame = source.next()) {
      ++count;
      auto tr = track_frame(frame->image, nullptr, *cache, config_.heads, frame->frame_id);
      res.trajectory.poses.push_back({frame->timestamp, tr.pose});
      res.frame_ids.push_back(frame->frame_id);
      res.generations.push_back(tr.generation);
    }
    if (count == 0) throw Error("map before track: the sequence has no frames");
    return res;
  }

  StreamResult run_stream(FrameSource& source, const StreamOptions& options = {}) const {
    return options.replay ? run_replay(source, options) : run_live(source, options);
  }

 private:
  static Pose relative_to(const Pose& gauge, const Pose& raw) {
    return se3_compose(se3_invert(gauge), raw);
  }

  // ---- keyframe decision helpers -------------------------------------

  std::optional<Pose> angle_pose(const StreamOptions& options, double timestamp,
                                 const Pose& estimate) const {
    if (!options.angle_reference) return estimate;
    const auto& ref = options.angle_reference->poses;
    for (const auto& p : ref) {
      if (std::abs(p.timestamp - timestamp) <= 0.02) return p.pose;
    }
    return std::nullopt;
  }

  Vec3 current_pivot(std::span<const Keyframe> buffer, const StreamOptions& options) const {
    switch (config_.pivot.kind) {
      case PivotRule::Kind::fixed:
        return config_.pivot.point;
      case PivotRule::Kind::first_keyframe_origin: {
        const auto p = angle_pose(options, buffer.front().timestamp, buffer.front().pose);
        return p ? p->translation : Vec3::Zero();
      }
      case PivotRule::Kind::fused_centroid:
        break;
    }
    PointCloud cloud = fuse_pointmaps(buffer, config_.confidence_floor);
    if (cloud.size() == 0) cloud = fuse_pointmaps(buffer, 0.0);
    Vec3 c = Vec3::Zero();
    for (const auto& p : cloud.xyz) c += Vec3(p[0], p[1], p[2]);
    return cloud.size() ? Vec3(c / static_cast<double>(cloud.size())) : Vec3::Zero();
  }

  std::optional<ViewAngles> angles_for(const StreamOptions& options, double timestamp,
                                       const Pose& estimate, const Vec3& pivot) const {
    const auto p = angle_pose(options, timestamp, estimate);
    if (!p) return std::nullopt;
    try {
      return view_angles(*p, pivot);
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  void refresh_angles(std::vector<Keyframe>& buffer, const StreamOptions& options,
                      Vec3& pivot) const {
    pivot = current_pivot(buffer, options);
    for (auto& kf : buffer) kf.angles = angles_for(options, kf.timestamp, kf.pose, pivot);
  }

  bool wants_keyframe(std::size_t frame_index, const std::optional<ViewAngles>& angles,
                      std::span<const Keyframe> buffer,
                      std::span<const ViewAngles> pending = {}) const {
    if (const auto* f = std::get_if<FixedInterval>(&config_.policy)) {
      return fixed_interval_due(frame_index, f->stride);
    }
    if (!angles) return false;
    std::vector<ViewAngles> existing(pending.begin(), pending.end());
    for (const auto& kf : buffer) {
      if (kf.angles) existing.push_back(*kf.angles);
    }
    return should_insert(*angles, existing, std::get<AngularThreshold>(config_.policy).tau);
  }

  static std::vector<double> confidences(std::span<const Keyframe> buffer) {
    std::vector<double> out;
    for (const auto& kf : buffer) out.push_back(kf.mean_confidence);
    return out;
  }

  // ---- deterministic interleaving -------------------------------------

  StreamResult run_replay(FrameSource& source, const StreamOptions& options) const {
    CacheStore store;
    StreamResult res;
    std::vector<Keyframe> buffer;
    Vec3 pivot = Vec3::Zero();
    std::size_t index = 0;

    for (; auto frame = source.next(); ++index) {
      if (buffer.empty()) {
        buffer.push_back(make_keyframe(*frame));
        auto published = store.publish(map_keyframes(buffer));
        refresh_angles(buffer, options, pivot);
        record(res, *frame, buffer.front().pose, published->generation);
        res.log.push_back({frame->frame_id, "bootstrap", buffer.front().angles.value_or(ViewAngles{}),
                           buffer.front().mean_confidence, published->generation});
        continue;
      }

      const CachePtr current = store.current();
      auto tracked = track_frame(frame->image, nullptr, *current, config_.heads, frame->frame_id);
      const auto angles = angles_for(options, frame->timestamp, tracked.pose, pivot);
      if (!wants_keyframe(index, angles, buffer)) {
        record(res, *frame, tracked.pose, tracked.generation);
        continue;
      }

      std::vector<Keyframe> trial = buffer;
      trial.push_back(make_keyframe(*frame));
      trial.back().angles = angles;
      auto published = store.publish(map_keyframes(trial));
      double confidence = trial.back().mean_confidence;
      if (options.confidence_override) {
        if (auto c = options.confidence_override(frame->frame_id)) confidence = *c;
      }
      trial.back().mean_confidence = confidence;

      if (maybe_reject(confidence, confidences(buffer), config_.rejection) == Admission::reject) {
        const CachePtr restored = store.rollback();
        auto retracked =
            track_frame(frame->image, nullptr, *restored, config_.heads, frame->frame_id);
        record(res, *frame, retracked.pose, restored->generation);
        res.log.push_back(
            {frame->frame_id, "reject", angles.value_or(ViewAngles{}), confidence, restored->generation});
        continue;
      }
      buffer = std::move(trial);
      refresh_angles(buffer, options, pivot);
      record(res, *frame, buffer.back().pose, published->generation);
      res.log.push_back(
          {frame->frame_id, "insert", angles.value_or(ViewAngles{}), confidence, published->generation});
    }
    if (index == 0) throw Error("map before track: the sequence has no frames");
    return finish(std::move(res), std::move(buffer), store.current());
  }

  // ---- two workers ------------------------------------------------------

  StreamResult run_live(FrameSource& source, const StreamOptions& options) const {
    CacheStore store;
    StreamResult res;

    std::mutex state_mutex;  // guards buffer, pivot, pending, log
    std::vector<Keyframe> buffer;
    Vec3 pivot = Vec3::Zero();
    std::vector<ViewAngles> pending;

    struct Candidate {
      Frame frame;
      std::optional<ViewAngles> angles;
    };
    BoundedQueue<Candidate> candidates(4);
    BoundedQueue<Frame> frames(options.frame_queue_capacity);
    std::exception_ptr producer_error;
    std::exception_ptr mapper_error;

    std::thread producer([&] {
      try {
        while (auto f = source.next()) {
          if (!frames.push(std::move(*f))) break;
        }
      } catch (...) {
        producer_error = std::current_exception();
      }
      frames.close();
    });

    auto mapper_body = [&] {
      while (auto cand = candidates.pop()) {
        std::vector<Keyframe> trial;
        std::vector<double> existing;
        {
          std::lock_guard lock(state_mutex);
          trial = buffer;
          existing = confidences(buffer);
        }
        trial.push_back(make_keyframe(cand->frame));
        auto published = store.publish(map_keyframes(trial));
        double confidence = trial.back().mean_confidence;
        if (options.confidence_override) {
          if (auto c = options.confidence_override(cand->frame.frame_id)) confidence = *c;
        }
        trial.back().mean_confidence = confidence;
        const auto angles = cand->angles.value_or(ViewAngles{});
        std::lock_guard lock(state_mutex);
        if (cand->angles && !pending.empty()) pending.erase(pending.begin());
        if (maybe_reject(confidence, existing, config_.rejection) == Admission::reject) {
          const auto restored = store.rollback();
          res.log.push_back({cand->frame.frame_id, "reject", angles, confidence,
                             restored->generation});
          continue;
        }
        buffer = std::move(trial);
        refresh_angles(buffer, options, pivot);
        res.log.push_back(
            {cand->frame.frame_id, "insert", angles, confidence, published->generation});
      }
    };
    std::thread mapper;

    std::size_t index = 0;
    try {
      for (; auto frame = frames.pop(); ++index) {
        if (index == 0) {
          std::lock_guard lock(state_mutex);
          buffer.push_back(make_keyframe(*frame));
          auto published = store.publish(map_keyframes(buffer));
          refresh_angles(buffer, options, pivot);
          record(res, *frame, buffer.front().pose, published->generation);
          res.log.push_back({frame->frame_id, "bootstrap", buffer.front().angles.value_or(ViewAngles{}),
                             buffer.front().mean_confidence, published->generation});
          mapper = std::thread([&] {
            try {
              mapper_body();
            } catch (...) {
              mapper_error = std::current_exception();
            }
          });
          continue;
        }
        const CachePtr current = store.current();
        auto tracked =
            track_frame(frame->image, nullptr, *current, config_.heads, frame->frame_id);
        record(res, *frame, tracked.pose, tracked.generation);
        std::lock_guard lock(state_mutex);
        const auto angles = angles_for(options, frame->timestamp, tracked.pose, pivot);
        if (wants_keyframe(index, angles, buffer, pending)) {
          if (candidates.try_push({*frame, angles})) {
            if (angles) pending.push_back(*angles);
          }
        }
      }
    } catch (...) {
      frames.close();
      candidates.close();
      producer.join();
      if (mapper.joinable()) mapper.join();
      throw;
    }
    candidates.close();
    producer.join();
    if (mapper.joinable()) mapper.join();
    if (producer_error) std::rethrow_exception(producer_error);
    if (mapper_error) std::rethrow_exception(mapper_error);
    if (index == 0) throw Error("map before track: the sequence has no frames");
    return finish(std::move(res), std::move(buffer), store.current());
  }

  static void record(StreamResult& res, const Frame& frame, const Pose& pose,
                     std::uint64_t generation) {
    res.trajectory.poses.push_back({frame.timestamp, pose});
    res.frame_ids.push_back(frame.frame_id);
    res.generations.push_back(generation);
  }

  StreamResult finish(StreamResult res, std::vector<Keyframe> buffer, CachePtr cache) const {
    res.cloud = fuse_pointmaps(buffer, config_.confidence_floor);
    res.keyframes = std::move(buffer);
    res.cache = std::move(cache);
    return res;
  }

  PipelineConfig config_;
  Aggregator aggregator_;
  DecoderHeads heads_;
};

}  // namespace kvtrack
