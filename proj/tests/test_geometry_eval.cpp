#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "kvtrack/evaluation.hpp"
#include "oracles.hpp"

using namespace kvtrack;

namespace {

Pose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-3, 3);
  return {oracle::random_rotation(rng), Vec3(u(rng), u(rng), u(rng))};
}

Sim3 random_sim3(std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(-5, 5);
  return {scale, oracle::random_rotation(rng), Vec3(u(rng), u(rng), u(rng))};
}

std::vector<Vec3> random_cloud(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Vec3> pts;
  for (std::size_t i = 0; i < n; ++i) pts.emplace_back(g(rng), g(rng), g(rng));
  return pts;
}

Trajectory circle(std::size_t n) {
  Trajectory t;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 2.0 * std::numbers::pi * double(i) / double(n);
    Pose p;
    p.rotation = Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix();
    p.translation = Vec3(std::cos(a), std::sin(a), 0.1 * std::sin(3 * a));
    t.poses.push_back({double(i) / 30.0, p});
  }
  return t;
}

double max_abs(const Mat3& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(Se3, InvertIdentity) {
  EXPECT_EQ(se3_invert(Pose::identity()), Pose::identity());
}

TEST(Se3, RandomRoundTrip) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto t = random_pose(rng);
    for (const auto& p : {se3_compose(t, se3_invert(t)), se3_compose(se3_invert(t), t)}) {
      EXPECT_LT(max_abs(p.rotation - Mat3::Identity()), 1e-9);
      EXPECT_LT(p.translation.norm(), 1e-9);
    }
  }
}

TEST(Se3, ComposeActsLikeFunctionComposition) {
  std::mt19937_64 rng(2);
  const auto a = random_pose(rng), b = random_pose(rng);
  const Vec3 x(0.3, -1.0, 2.0);
  EXPECT_LT((se3_compose(a, b).apply(x) - a.apply(b.apply(x))).norm(), 1e-12);
}

TEST(Sim3, UnitScaleIsRigid) {
  std::mt19937_64 rng(3);
  const auto p = random_pose(rng);
  const Sim3 s{1.0, p.rotation, p.translation};
  const Vec3 x(1.0, 2.0, 3.0);
  EXPECT_LT((sim3_apply(s, x) - p.apply(x)).norm(), 1e-12);
  const auto g = random_sim3(rng, 0.4);
  EXPECT_LT((sim3_invert(g).apply(g.apply(x)) - x).norm(), 1e-12);
}

TEST(RotationAngle, SymmetricAndAntipodal) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    const auto a = oracle::random_rotation(rng), b = oracle::random_rotation(rng);
    EXPECT_NEAR(rotation_angle(a, b), rotation_angle(b, a), 1e-12);
    EXPECT_GE(rotation_angle(a, b), 0.0);
    EXPECT_LE(rotation_angle(a, b), std::numbers::pi + 1e-12);
  }
  const Mat3 flip = Eigen::AngleAxisd(std::numbers::pi, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  EXPECT_NEAR(rad2deg(rotation_angle(flip, Mat3::Identity())), 180.0, 1e-6);
  const Mat3 small = Eigen::AngleAxisd(1e-8, Vec3::UnitX()).toRotationMatrix();
  EXPECT_NEAR(rotation_angle(small, Mat3::Identity()), 1e-8, 1e-14);
}

TEST(Quaternion, RoundTripAndSign) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto r = oracle::random_rotation(rng);
    const auto q = rotation_to_quaternion(r);
    EXPECT_GE(q(3), 0.0);
    EXPECT_NEAR(q.norm(), 1.0, 1e-12);
    EXPECT_LT(max_abs(quaternion_to_rotation(q(0), q(1), q(2), q(3)) - r), 1e-12);
  }
  EXPECT_THROW(quaternion_to_rotation(0, 0, 0, 0), Error);
}

TEST(NearestRotation, ProperOrthonormal) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  for (int i = 0; i < 100; ++i) {
    Mat3 m;
    for (int k = 0; k < 9; ++k) m.data()[k] = g(rng);
    const auto r = nearest_rotation(m);
    EXPECT_LT(max_abs(r.transpose() * r - Mat3::Identity()), 1e-12);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
  }
}

TEST(Umeyama, IdentityInput) {
  std::mt19937_64 rng(7);
  const auto pts = random_cloud(rng, 10);
  const auto s = umeyama_sim3(pts, pts);
  EXPECT_NEAR(s.scale, 1.0, 1e-9);
  EXPECT_LT(max_abs(s.rotation - Mat3::Identity()), 1e-9);
  EXPECT_LT(s.translation.norm(), 1e-9);
}

TEST(Umeyama, RecoversInverseOfPlantedTransform) {
  std::mt19937_64 rng(8);
  const auto gt = random_cloud(rng, 20);
  Sim3 planted{2.5, oracle::random_rotation(rng), Vec3(1, -2, 0.5)};
  std::vector<Vec3> est;
  for (const auto& p : gt) est.push_back(planted.apply(p));
  const auto s = umeyama_sim3(est, gt);
  const auto inv = sim3_invert(planted);
  EXPECT_NEAR(s.scale, inv.scale, 1e-9);
  EXPECT_LT(max_abs(s.rotation - inv.rotation), 1e-9);
  EXPECT_LT((s.translation - inv.translation).norm(), 1e-9);
  for (std::size_t i = 0; i < gt.size(); ++i) EXPECT_LT((s.apply(est[i]) - gt[i]).norm(), 1e-9);
}

TEST(Umeyama, PropertyPlantedSim3AndHornOracle) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> log_scale(std::log(0.1), std::log(10.0));
  for (int trial = 0; trial < 100; ++trial) {
    const auto gt = random_cloud(rng, 3 + trial % 30);
    const auto planted = random_sim3(rng, std::exp(log_scale(rng)));
    std::vector<Vec3> est;
    for (const auto& p : gt) est.push_back(planted.apply(p));
    const auto s = umeyama_sim3(est, gt);
    for (std::size_t i = 0; i < gt.size(); ++i) ASSERT_LT((s.apply(est[i]) - gt[i]).norm(), 1e-9);
    const auto h = oracle::horn_sim3(est, gt);
    EXPECT_NEAR(s.scale, h.scale, 1e-9 * h.scale);
    EXPECT_LT(max_abs(s.rotation - h.rotation), 1e-9);
  }
}

TEST(Umeyama, NoisyPointsMonteCarlo) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> noise(0.0, 0.01);
  const auto gt = random_cloud(rng, 100);
  std::vector<Vec3> est;
  for (const auto& p : gt) est.push_back(p + Vec3(noise(rng), noise(rng), noise(rng)));
  const auto s = umeyama_sim3(est, gt);
  double sum = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) sum += (s.apply(est[i]) - gt[i]).squaredNorm();
  // Per-point 3D noise RMS is sqrt(3) * sigma; the fit can only reduce it.
  EXPECT_LE(std::sqrt(sum / 100.0), std::sqrt(3.0) * 0.01 * 1.2);
  EXPECT_NEAR(s.scale, 1.0, 0.01);
  const auto h = oracle::horn_sim3(est, gt);
  EXPECT_NEAR(s.scale, h.scale, 1e-9);
  EXPECT_LT(max_abs(s.rotation - h.rotation), 1e-9);
}

TEST(Umeyama, DegenerateInputs) {
  const std::vector<Vec3> two = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
  EXPECT_THROW(umeyama_sim3(two, two), Error);
  const std::vector<Vec3> line = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)};
  EXPECT_THROW(umeyama_sim3(line, line), Error);
  const std::vector<Vec3> tri = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  EXPECT_THROW(umeyama_sim3(tri, line), Error);
  const std::vector<Vec3> same(3, Vec3(1, 1, 1));
  EXPECT_THROW(umeyama_sim3(same, tri), Error);
}

TEST(Ate, ZeroForIdenticalAndGaugeInvariant) {
  std::mt19937_64 rng(11);
  const auto gt = circle(50);
  EXPECT_NEAR(ate_rmse(gt, gt), 0.0, 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = random_sim3(rng, std::exp(std::uniform_real_distribution<double>(-2, 2)(rng)));
    Trajectory est = gt;
    for (auto& sp : est.poses) sp.pose = sim3_apply(g, sp.pose);
    EXPECT_NEAR(ate_rmse(est, gt), 0.0, 1e-9);
  }
}

TEST(Ate, OneDisplacedPoseMatchesBruteForce) {
  const auto gt = circle(100);
  Trajectory est = gt;
  est.poses[17].pose.translation += Vec3(0.1, 0.0, 0.0);
  std::vector<Vec3> a, b;
  for (std::size_t i = 0; i < 100; ++i) {
    a.push_back(est.poses[i].pose.translation);
    b.push_back(gt.poses[i].pose.translation);
  }
  const auto h = oracle::horn_sim3(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < 100; ++i) sum += (h.apply(a[i]) - b[i]).squaredNorm();
  const double brute = std::sqrt(sum / 100.0);
  const double rmse = ate_rmse(est, gt);
  EXPECT_NEAR(rmse, brute, 1e-9);
  EXPECT_NEAR(rmse, 0.1 / std::sqrt(100.0), 0.002);
}

TEST(Ate, AssociationWindow) {
  auto gt = circle(10);
  for (std::size_t i = 0; i < gt.poses.size(); ++i) gt.poses[i].timestamp = double(i);
  Trajectory est = gt;
  for (auto& sp : est.poses) sp.timestamp += 0.015;
  EXPECT_EQ(ate(est, gt).matched, 10u);
  for (auto& sp : est.poses) sp.timestamp += 0.01;
  EXPECT_EQ(associate(est, gt).size(), 0u);
  EXPECT_THROW(ate(est, gt), Error);
}

TEST(Recall, IdentityIsPerfect) {
  const auto gt = circle(20);
  std::vector<Pose> p;
  for (const auto& sp : gt.poses) p.push_back(sp.pose);
  EXPECT_EQ(pose_recall(p, p, kStandardRecallThresholds), (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Recall, CraftedErrors) {
  // Ten cameras on a wide ring; three carry 2 cm / 2 degree errors whose
  // translation offsets sum to zero, so the alignment is undisturbed.
  std::vector<Pose> gt, est;
  for (int i = 0; i < 10; ++i) {
    const double a = 2.0 * std::numbers::pi * i / 10.0;
    Pose p;
    p.rotation = Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix();
    p.translation = Vec3(10 * std::cos(a), 10 * std::sin(a), i % 2 ? 1.0 : -1.0);
    gt.push_back(p);
    est.push_back(p);
  }
  for (int k = 0; k < 3; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 3.0;
    est[k].translation += 0.02 * Vec3(std::cos(a), std::sin(a), 0.0);
    est[k].rotation = est[k].rotation * Eigen::AngleAxisd(deg2rad(2.0), Vec3::UnitX()).toRotationMatrix();
  }
  const auto r = pose_recall(est, gt, kStandardRecallThresholds);
  EXPECT_NEAR(r[0], 0.7, 1e-12);
  EXPECT_NEAR(r[1], 1.0, 1e-12);
  EXPECT_NEAR(r[2], 1.0, 1e-12);
}

TEST(Recall, AntipodalRotationNeverCounts) {
  std::vector<Pose> gt(4), est(4);
  for (int i = 0; i < 4; ++i) {
    gt[i].translation = Vec3(i, i * i, 0.5 * i);
    est[i] = gt[i];
    est[i].rotation = Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitY()).toRotationMatrix();
  }
  EXPECT_EQ(pose_recall(est, gt, kStandardRecallThresholds, false),
            (std::vector<double>{0.0, 0.0, 0.0}));
}

TEST(Recall, MonotoneInBothComponents) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g(0.0, 0.02);
  std::vector<Pose> gt, est;
  for (int i = 0; i < 60; ++i) {
    const auto p = random_pose(rng);
    gt.push_back(p);
    Pose e = p;
    e.translation += Vec3(g(rng), g(rng), g(rng));
    e.rotation = e.rotation * Eigen::AngleAxisd(g(rng) * 2, Vec3(g(rng), g(rng), 1).normalized()).toRotationMatrix();
    est.push_back(e);
  }
  std::vector<RecallThreshold> th;
  for (double cm = 0.5; cm <= 8; cm += 0.5) th.push_back({cm, 2.0});
  auto r = pose_recall(est, gt, th);
  EXPECT_TRUE(std::is_sorted(r.begin(), r.end()));
  th.clear();
  for (double deg = 0.5; deg <= 8; deg += 0.5) th.push_back({3.0, deg});
  r = pose_recall(est, gt, th);
  EXPECT_TRUE(std::is_sorted(r.begin(), r.end()));
}

TEST(Recall, EmptyInput) {
  EXPECT_THROW(pose_recall({}, {}, kStandardRecallThresholds), Error);
}

TEST(Tum, RoundTrip) {
  const auto t = circle(12);
  std::stringstream buf;
  write_tum(buf, t);
  const auto back = read_tum(buf);
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_NEAR(back.poses[i].timestamp, t.poses[i].timestamp, 1e-6);
    EXPECT_LT((back.poses[i].pose.translation - t.poses[i].pose.translation).norm(), 1e-8);
    EXPECT_LT(max_abs(back.poses[i].pose.rotation - t.poses[i].pose.rotation), 1e-8);
  }
  std::stringstream first;
  write_tum(first, t);
  EXPECT_EQ(first.str().substr(0, first.str().find('\n')),
            "0.000000 1.000000000 0.000000000 0.000000000 0.000000000 0.000000000 0.000000000 1.000000000");
}

TEST(Tum, RejectsBadInput) {
  std::stringstream bad("0.0 1 2 3\n");
  EXPECT_THROW(read_tum(bad), Error);
  std::stringstream order("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n");
  EXPECT_THROW(read_tum(order), Error);
  std::stringstream comments("# header\n\n0.0 0 0 0 0 0 0 1\n");
  EXPECT_EQ(read_tum(comments).size(), 1u);
}

TEST(Report, KeyValueLines) {
  const auto gt = circle(30);
  std::ostringstream out;
  write_report(out, evaluate(gt, gt));
  const auto s = out.str();
  EXPECT_NE(s.find("ate_rmse=0.000000000"), std::string::npos);
  EXPECT_NE(s.find("matched=30"), std::string::npos);
  EXPECT_NE(s.find("recall_1cm_1deg=1.000000"), std::string::npos);
  EXPECT_NE(s.find("recall_5cm_5deg=1.000000"), std::string::npos);
  std::ostringstream csv;
  write_report_csv(csv, evaluate(gt, gt));
  EXPECT_EQ(csv.str().substr(0, 13), "metric,value\n");
}
