#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "kvtrack/matrix.hpp"

namespace kvtrack {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rigid camera-to-world transform: x_world = rotation * x_cam + translation.
/// The camera center in world coordinates is therefore `translation`.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  friend bool operator==(const Pose& a, const Pose& b) {
    return a.rotation == b.rotation && a.translation == b.translation;
  }
};

/// x -> scale * rotation * x + translation.
struct Sim3 {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
};

inline Pose se3_compose(const Pose& a, const Pose& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Pose se3_invert(const Pose& t) {
  const Mat3 rt = t.rotation.transpose();
  return {rt, -(rt * t.translation)};
}

inline Vec3 sim3_apply(const Sim3& s, const Vec3& p) { return s.apply(p); }

/// Applies a similarity to a camera-to-world pose (re-expresses it in the
/// aligned world frame).
inline Pose sim3_apply(const Sim3& s, const Pose& pose) {
  return {s.rotation * pose.rotation, s.apply(pose.translation)};
}

inline Sim3 sim3_invert(const Sim3& s) {
  const Mat3 rt = s.rotation.transpose();
  return {1.0 / s.scale, rt, -(rt * s.translation) / s.scale};
}

/// Geodesic angle (radians) between two rotations, symmetric in its arguments.
inline double rotation_angle(const Mat3& a, const Mat3& b) {
  const Mat3 r = a * b.transpose();
  const double cos_part = 0.5 * (r.trace() - 1.0);
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * axis.norm(), cos_part);
}

/// Nearest proper rotation (Frobenius) to an arbitrary 3x3 matrix.
inline Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

/// Unit quaternion (x, y, z, w) with w >= 0.
inline Eigen::Vector4d rotation_to_quaternion(const Mat3& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  return {q.x(), q.y(), q.z(), q.w()};
}

inline Mat3 quaternion_to_rotation(double qx, double qy, double qz, double qw) {
  Eigen::Quaterniond q(qw, qx, qy, qz);
  if (q.norm() == 0.0) throw Error("zero quaternion");
  q.normalize();
  return q.toRotationMatrix();
}

/// Least-squares similarity mapping `est` onto `gt` (closed form via the SVD
/// of the centered cross-covariance, with reflection correction).
inline Sim3 umeyama_sim3(std::span<const Vec3> est, std::span<const Vec3> gt) {
  if (est.size() != gt.size()) throw Error("umeyama: point sets differ in size");
  const std::size_t n = est.size();
  if (n < 3) throw Error("umeyama: need at least 3 point pairs, got " + std::to_string(n));

  Vec3 mu_est = Vec3::Zero();
  Vec3 mu_gt = Vec3::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    mu_est += est[i];
    mu_gt += gt[i];
  }
  mu_est /= static_cast<double>(n);
  mu_gt /= static_cast<double>(n);

  Mat3 cov = Mat3::Zero();
  Mat3 gt_scatter = Mat3::Zero();
  double var_est = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 a = est[i] - mu_est;
    const Vec3 b = gt[i] - mu_gt;
    cov += b * a.transpose();
    gt_scatter += b * b.transpose();
    var_est += a.squaredNorm();
  }
  cov /= static_cast<double>(n);
  var_est /= static_cast<double>(n);

  Eigen::JacobiSVD<Mat3> gt_svd(gt_scatter);
  const auto& gsv = gt_svd.singularValues();
  if (gsv(0) <= 0.0 || gsv(1) <= 1e-12 * gsv(0)) {
    throw Error("umeyama: degenerate (collinear) ground-truth configuration");
  }
  if (var_est <= 0.0) throw Error("umeyama: estimated points are all coincident");

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(1) <= 1e-12 * std::max(sv(0), 1e-300)) {
    throw Error("umeyama: degenerate configuration (cross-covariance rank < 2)");
  }
  Mat3 s = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2, 2) = -1.0;

  Sim3 out;
  out.rotation = svd.matrixU() * s * svd.matrixV().transpose();
  out.scale = (sv.asDiagonal() * s).trace() / var_est;
  out.translation = mu_gt - out.scale * out.rotation * mu_est;
  return out;
}

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

}  // namespace kvtrack
