#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kvtrack/geometry.hpp"

namespace kvtrack {

struct StampedPose {
  double timestamp = 0.0;
  Pose pose;
};

/// Poses ordered by strictly increasing timestamp.
struct Trajectory {
  std::vector<StampedPose> poses;

  std::size_t size() const noexcept { return poses.size(); }

  void validate() const {
    for (std::size_t i = 1; i < poses.size(); ++i) {
      if (!(poses[i].timestamp > poses[i - 1].timestamp)) {
        throw Error("trajectory timestamps must be strictly increasing (entry " +
                    std::to_string(i) + ")");
      }
    }
  }
};

/// One line per pose: `timestamp tx ty tz qx qy qz qw`.
inline void write_tum(std::ostream& out, const Trajectory& traj) {
  char buf[256];
  for (const auto& sp : traj.poses) {
    const auto q = rotation_to_quaternion(sp.pose.rotation);
    const auto& t = sp.pose.translation;
    std::snprintf(buf, sizeof buf, "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n", sp.timestamp,
                  t.x(), t.y(), t.z(), q(0), q(1), q(2), q(3));
    out << buf;
  }
}

inline void save_tum(const std::filesystem::path& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write trajectory " + path.string());
  write_tum(out, traj);
}

inline Trajectory read_tum(std::istream& in, const std::string& name = "trajectory") {
  Trajectory traj;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double v[8];
    for (auto& x : v) {
      if (!(ls >> x)) {
        throw Error(name + ":" + std::to_string(lineno) + ": expected 8 numbers");
      }
    }
    traj.poses.push_back(
        {v[0], Pose{quaternion_to_rotation(v[4], v[5], v[6], v[7]), Vec3(v[1], v[2], v[3])}});
  }
  traj.validate();
  return traj;
}

inline Trajectory load_tum(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open trajectory " + path.string());
  return read_tum(in, path.string());
}

/// Pairs each estimated pose with the nearest ground-truth timestamp within
/// `max_dt` seconds; unmatched poses are dropped. Returns (est, gt) indices.
inline std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est,
                                                                  const Trajectory& gt,
                                                                  double max_dt = 0.02) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  if (gt.poses.empty()) return pairs;
  for (std::size_t i = 0; i < est.poses.size(); ++i) {
    const double t = est.poses[i].timestamp;
    const auto it = std::lower_bound(
        gt.poses.begin(), gt.poses.end(), t,
        [](const StampedPose& p, double value) { return p.timestamp < value; });
    std::size_t best = gt.poses.size();
    double best_dt = max_dt;
    for (auto cand : {it, it == gt.poses.begin() ? it : std::prev(it)}) {
      if (cand == gt.poses.end()) continue;
      const double dt = std::abs(cand->timestamp - t);
      if (dt <= best_dt) {
        best_dt = dt;
        best = static_cast<std::size_t>(cand - gt.poses.begin());
      }
    }
    if (best != gt.poses.size()) pairs.emplace_back(i, best);
  }
  return pairs;
}

struct AteResult {
  double rmse = 0.0;
  std::size_t matched = 0;
  Sim3 alignment;
};

/// Sim(3)-aligned RMSE of camera-center residuals.
inline AteResult ate(const Trajectory& est, const Trajectory& gt, double max_dt = 0.02) {
  const auto pairs = associate(est, gt, max_dt);
  if (pairs.size() < 3) {
    throw Error("ATE needs at least 3 associated poses, got " + std::to_string(pairs.size()));
  }
  std::vector<Vec3> a;
  std::vector<Vec3> b;
  for (auto [i, j] : pairs) {
    a.push_back(est.poses[i].pose.translation);
    b.push_back(gt.poses[j].pose.translation);
  }
  AteResult r;
  r.matched = pairs.size();
  r.alignment = umeyama_sim3(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sum += (b[i] - r.alignment.apply(a[i])).squaredNorm();
  }
  r.rmse = std::sqrt(sum / static_cast<double>(a.size()));
  return r;
}

inline double ate_rmse(const Trajectory& est, const Trajectory& gt, double max_dt = 0.02) {
  return ate(est, gt, max_dt).rmse;
}

/// Tolerance pair: translation in centimeters, rotation in degrees.
struct RecallThreshold {
  double cm;
  double deg;
};

inline constexpr RecallThreshold kStandardRecallThresholds[] = {{1, 1}, {3, 3}, {5, 5}};

/// Fraction of poses whose translation error (meters, compared against cm/100)
/// and geodesic rotation error are both within each tolerance. When `align`
/// is set, a single Sim(3) fitted on camera centers is applied first.
inline std::vector<double> pose_recall(std::span<const Pose> est, std::span<const Pose> gt,
                                       std::span<const RecallThreshold> thresholds,
                                       bool align = true) {
  if (est.empty() || gt.empty()) throw Error("pose_recall: empty input");
  if (est.size() != gt.size()) throw Error("pose_recall: pose lists differ in length");
  std::vector<Pose> aligned(est.begin(), est.end());
  if (align) {
    std::vector<Vec3> a;
    std::vector<Vec3> b;
    for (std::size_t i = 0; i < est.size(); ++i) {
      a.push_back(est[i].translation);
      b.push_back(gt[i].translation);
    }
    const Sim3 s = umeyama_sim3(a, b);
    for (auto& p : aligned) p = sim3_apply(s, p);
  }
  std::vector<double> t_err(est.size());
  std::vector<double> r_err(est.size());
  for (std::size_t i = 0; i < est.size(); ++i) {
    t_err[i] = (aligned[i].translation - gt[i].translation).norm();
    r_err[i] = rad2deg(rotation_angle(aligned[i].rotation, gt[i].rotation));
  }
  std::vector<double> recall;
  for (const auto& th : thresholds) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < est.size(); ++i) {
      if (t_err[i] <= th.cm / 100.0 && r_err[i] <= th.deg) ++ok;
    }
    recall.push_back(static_cast<double>(ok) / static_cast<double>(est.size()));
  }
  return recall;
}

struct EvalReport {
  AteResult ate;
  std::vector<RecallThreshold> thresholds;
  std::vector<double> recall;
};

/// ATE plus recall on the associated pairs.
inline EvalReport evaluate(const Trajectory& est, const Trajectory& gt, double max_dt = 0.02) {
  EvalReport rep;
  rep.ate = ate(est, gt, max_dt);
  std::vector<Pose> e;
  std::vector<Pose> g;
  for (auto [i, j] : associate(est, gt, max_dt)) {
    e.push_back(est.poses[i].pose);
    g.push_back(gt.poses[j].pose);
  }
  rep.thresholds.assign(std::begin(kStandardRecallThresholds),
                        std::end(kStandardRecallThresholds));
  rep.recall = pose_recall(e, g, rep.thresholds);
  return rep;
}

/// key=value lines.
inline void write_report(std::ostream& out, const EvalReport& rep) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "ate_rmse=%.9f\nmatched=%zu\nalign_scale=%.9f\n",
                rep.ate.rmse, rep.ate.matched, rep.ate.alignment.scale);
  out << buf;
  for (std::size_t i = 0; i < rep.thresholds.size(); ++i) {
    std::snprintf(buf, sizeof buf, "recall_%gcm_%gdeg=%.6f\n", rep.thresholds[i].cm,
                  rep.thresholds[i].deg, rep.recall[i]);
    out << buf;
  }
}

inline void write_report_csv(std::ostream& out, const EvalReport& rep) {
  out << "metric,value\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "ate_rmse,%.9f\nmatched,%zu\n", rep.ate.rmse, rep.ate.matched);
  out << buf;
  for (std::size_t i = 0; i < rep.thresholds.size(); ++i) {
    std::snprintf(buf, sizeof buf, "recall_%gcm_%gdeg,%.6f\n", rep.thresholds[i].cm,
                  rep.thresholds[i].deg, rep.recall[i]);
    out << buf;
  }
}

}  // namespace kvtrack
