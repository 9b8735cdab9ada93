#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kvtrack/aggregator.hpp"
#include "kvtrack/geometry.hpp"
#include "kvtrack/heads.hpp"
#include "kvtrack/image.hpp"

namespace kvtrack {

/// Spherical angles of a camera center about a pivot. Azimuth in (-pi, pi],
/// elevation in [-pi/2, pi/2].
struct ViewAngles {
  double azimuth = 0.0;
  double elevation = 0.0;
};

/// Maps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

inline ViewAngles view_angles(const Pose& pose, const Vec3& pivot) {
  const Vec3 d = pose.translation - pivot;
  const double r = d.norm();
  if (!(r > 1e-12)) throw Error("degenerate viewpoint: camera center coincides with pivot");
  const double s = std::clamp(d.z() / r, -1.0, 1.0);
  return {std::atan2(d.y(), d.x()), std::asin(s)};
}

struct FixedInterval {
  std::size_t stride = 50;
};
struct AngularThreshold {
  double tau = 10.0 * std::numbers::pi / 180.0;  // radians
};
using KeyframePolicy = std::variant<FixedInterval, AngularThreshold>;

inline void validate_policy(const KeyframePolicy& policy) {
  if (const auto* f = std::get_if<FixedInterval>(&policy)) {
    if (f->stride < 1) throw Error("keyframe stride must be >= 1");
  } else if (!(std::get<AngularThreshold>(policy).tau > 0.0)) {
    throw Error("angular threshold must be positive");
  }
}

/// True iff the smallest azimuth gap (shortest way round) or the smallest
/// elevation gap to every existing keyframe exceeds tau.
inline bool should_insert(const ViewAngles& angles, std::span<const ViewAngles> existing,
                          double tau) {
  if (!(tau > 0.0)) throw Error("angular threshold must be positive");
  if (existing.empty()) return true;
  double min_az = std::numeric_limits<double>::infinity();
  double min_el = std::numeric_limits<double>::infinity();
  for (const auto& kf : existing) {
    min_az = std::min(min_az, std::abs(wrap_angle(angles.azimuth - kf.azimuth)));
    min_el = std::min(min_el, std::abs(angles.elevation - kf.elevation));
  }
  return min_az > tau || min_el > tau;
}

/// Frame indices 0, k, 2k, ... are keyframes.
inline bool fixed_interval_due(std::size_t frame_index, std::size_t stride) {
  return frame_index % stride == 0;
}

/// Linear-interpolated percentile (q in [0, 100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct RejectionPolicy {
  double percentile = 10.0;
  double absolute_floor = 0.05;
  std::size_t bootstrap = 3;  // buffers smaller than this always accept
};

enum class Admission { accept, reject };

inline double confidence_floor(std::span<const double> existing, const RejectionPolicy& policy) {
  if (existing.empty()) return policy.absolute_floor;
  return std::max(policy.absolute_floor,
                  percentile({existing.begin(), existing.end()}, policy.percentile));
}

/// Rejects a candidate whose mean confidence falls below the floor derived
/// from the keyframes already in the buffer.
inline Admission maybe_reject(double candidate_confidence, std::span<const double> existing,
                              const RejectionPolicy& policy = {}) {
  if (existing.size() < policy.bootstrap) return Admission::accept;
  return candidate_confidence < confidence_floor(existing, policy) ? Admission::reject
                                                                   : Admission::accept;
}

struct Keyframe {
  std::uint64_t frame_id = 0;
  double timestamp = 0.0;
  std::shared_ptr<const Image> image;
  TokenMatrix tokens;  // encoder output, before aggregation
  Pose pose;           // gauge-fixed estimate
  std::optional<ViewAngles> angles;  // empty when the viewpoint is degenerate
  double mean_confidence = 1.0;
  std::optional<PointMap> points;
  std::optional<ConfidenceMap> confidence;
};

/// Reference point for view angles.
struct PivotRule {
  enum class Kind { first_keyframe_origin, fused_centroid, fixed } kind = Kind::fused_centroid;
  Vec3 point = Vec3::Zero();  // used by Kind::fixed
};

struct InsertionLogEntry {
  std::uint64_t frame_id = 0;
  std::string decision;  // "bootstrap", "insert", "reject", "skip"
  ViewAngles angles;
  double confidence = 0.0;
  std::uint64_t generation = 0;
};

inline void write_insertion_log(std::ostream& out, std::span<const InsertionLogEntry> log) {
  out << "frame_id,decision,azimuth_deg,elevation_deg,confidence,generation\n";
  char buf[160];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%llu,%s,%.6f,%.6f,%.6f,%llu\n",
                  static_cast<unsigned long long>(e.frame_id), e.decision.c_str(),
                  rad2deg(e.angles.azimuth), rad2deg(e.angles.elevation), e.confidence,
                  static_cast<unsigned long long>(e.generation));
    out << buf;
  }
}

}  // namespace kvtrack
