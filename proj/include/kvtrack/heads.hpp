#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "kvtrack/aggregator.hpp"
#include "kvtrack/geometry.hpp"
#include "kvtrack/random.hpp"

namespace kvtrack {

struct HeadConfig {
  bool decode_pose = true;  // always on
  bool decode_points = true;
  bool decode_confidence = true;

  static HeadConfig pose_only() { return {true, false, false}; }
  static HeadConfig all() { return {true, true, true}; }
};

/// Per-pixel 3D points in the local camera frame, xyz interleaved.
struct PointMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> xyz;

  Vec3 at(std::size_t x, std::size_t y) const {
    const float* p = &xyz[(y * width + x) * 3];
    return {p[0], p[1], p[2]};
  }
};

struct ConfidenceMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> values;  // in [0, 1]

  float at(std::size_t x, std::size_t y) const { return values[y * width + x]; }

  double mean() const {
    if (values.empty()) return 0.0;
    double s = 0.0;
    for (float v : values) s += v;
    return s / static_cast<double>(values.size());
  }
};

struct HeadOutput {
  Pose pose;  // in the model's own frame, before gauge fixing
  std::optional<PointMap> points;
  std::optional<ConfidenceMap> confidence;
};

/// Toy decoder heads. The three heads read disjoint weights and run
/// independently, so toggling the geometry heads cannot change the pose.
class DecoderHeads {
 public:
  DecoderHeads(std::size_t d_k, std::size_t patch_size, std::uint64_t seed)
      : d_k_(d_k), patch_size_(patch_size) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(d_k));
    pose_w_ = seeded_uniform(d_k, 12, bound, seed, 0, "pose_head");
    point_w_ = seeded_uniform(d_k, 3 * patch_size * patch_size, bound, seed, 0, "point_head");
    conf_w_ = seeded_uniform(d_k, patch_size * patch_size, bound, seed, 0, "confidence_head");
  }

  explicit DecoderHeads(const AggregatorConfig& cfg)
      : DecoderHeads(cfg.d_k, cfg.patch_size, cfg.seed) {}

  HeadOutput decode(const TokenMatrix& tokens, const HeadConfig& heads) const {
    if (tokens.width() != d_k_) throw Error("decode_heads: token width mismatch");
    if (!heads.decode_pose) throw Error("decode_heads: the pose head cannot be disabled");
    HeadOutput out;
    out.pose = decode_pose(tokens);
    if (heads.decode_points) out.points = decode_points(tokens);
    if (heads.decode_confidence) out.confidence = decode_confidence(tokens);
    return out;
  }

  /// Mean register token -> 12 values: 3x3 block (added to identity, then
  /// projected to the nearest rotation) and a translation.
  Pose decode_pose(const TokenMatrix& tokens) const {
    // Without register tokens the patch tokens are averaged instead.
    const bool registers = tokens.register_count > 0;
    const std::size_t begin = registers ? tokens.patch_count : 0;
    const std::size_t count = registers ? tokens.register_count : tokens.patch_count;
    std::vector<double> mean(d_k_, 0.0);
    for (std::size_t r = begin; r < begin + count; ++r) {
      const auto row = tokens.tokens.row(r);
      for (std::size_t c = 0; c < d_k_; ++c) mean[c] += row[c];
    }
    for (auto& v : mean) v /= static_cast<double>(count);

    double out[12] = {};
    for (std::size_t c = 0; c < d_k_; ++c) {
      const auto w = pose_w_.row(c);
      for (std::size_t j = 0; j < 12; ++j) out[j] += mean[c] * w[j];
    }
    Mat3 m;
    m << 1.0 + out[0], out[1], out[2], out[3], 1.0 + out[4], out[5], out[6], out[7],
        1.0 + out[8];
    return {nearest_rotation(m), Vec3(out[9], out[10], out[11])};
  }

  PointMap decode_points(const TokenMatrix& tokens) const {
    const std::size_t p = patch_size_;
    PointMap map{tokens.grid_cols * p, tokens.grid_rows * p, {}};
    map.xyz.assign(map.width * map.height * 3, 0.0f);
    for (std::size_t gr = 0; gr < tokens.grid_rows; ++gr) {
      for (std::size_t gc = 0; gc < tokens.grid_cols; ++gc) {
        const auto block = project_row(tokens.tokens.row(gr * tokens.grid_cols + gc), point_w_);
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            float* dst = &map.xyz[((gr * p + y) * map.width + gc * p + x) * 3];
            const float* src = &block[(y * p + x) * 3];
            dst[0] = src[0];
            dst[1] = src[1];
            dst[2] = 1.0f + src[2];
          }
        }
      }
    }
    return map;
  }

  ConfidenceMap decode_confidence(const TokenMatrix& tokens) const {
    const std::size_t p = patch_size_;
    ConfidenceMap map{tokens.grid_cols * p, tokens.grid_rows * p, {}};
    map.values.assign(map.width * map.height, 0.0f);
    for (std::size_t gr = 0; gr < tokens.grid_rows; ++gr) {
      for (std::size_t gc = 0; gc < tokens.grid_cols; ++gc) {
        const auto block = project_row(tokens.tokens.row(gr * tokens.grid_cols + gc), conf_w_);
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            map.values[(gr * p + y) * map.width + gc * p + x] =
                1.0f / (1.0f + std::exp(-block[y * p + x]));
          }
        }
      }
    }
    return map;
  }

 private:
  static std::vector<float> project_row(std::span<const float> token, const Matrix& w) {
    std::vector<float> out(w.cols(), 0.0f);
    for (std::size_t c = 0; c < token.size(); ++c) {
      const auto wr = w.row(c);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += token[c] * wr[j];
    }
    return out;
  }

  std::size_t d_k_;
  std::size_t patch_size_;
  Matrix pose_w_;
  Matrix point_w_;
  Matrix conf_w_;
};

inline HeadOutput decode_heads(const TokenMatrix& tokens, const DecoderHeads& decoder,
                               const HeadConfig& heads) {
  return decoder.decode(tokens, heads);
}

}  // namespace kvtrack
