#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kvtrack/attention.hpp"
#include "kvtrack/image.hpp"
#include "kvtrack/matrix.hpp"
#include "kvtrack/random.hpp"

namespace kvtrack {

struct Resolution {
  std::size_t width = 0;
  std::size_t height = 0;
  friend bool operator==(const Resolution&, const Resolution&) = default;
};

/// Supported resolution presets (width x height).
inline constexpr Resolution kResolutionPresets[] = {
    {224, 224}, {308, 308}, {350, 266}, {518, 518}};

struct AggregatorConfig {
  std::size_t num_layers = 4;  // alternating frame-wise / global, so even
  std::size_t d_k = 32;
  std::size_t patch_size = 14;
  std::size_t num_register_tokens = 4;
  std::uint64_t seed = 0;
  bool positional_encoding = true;

  std::size_t num_global_layers() const noexcept { return num_layers / 2; }

  void validate() const {
    if (num_layers < 2 || num_layers % 2 != 0) {
      throw Error("num_layers must be even and >= 2, got " + std::to_string(num_layers));
    }
    if (d_k < 4) throw Error("d_k must be >= 4, got " + std::to_string(d_k));
    if (patch_size == 0) throw Error("patch_size must be positive");
  }

  void validate_resolution(std::size_t width, std::size_t height) const {
    if (width == 0 || height == 0 || width % patch_size != 0 || height % patch_size != 0) {
      std::string valid;
      for (const auto& r : kResolutionPresets) {
        if (r.width % patch_size == 0 && r.height % patch_size == 0) {
          if (!valid.empty()) valid += ", ";
          valid += std::to_string(r.width) + "x" + std::to_string(r.height);
        }
      }
      throw Error("resolution " + std::to_string(width) + "x" + std::to_string(height) +
                  " is not divisible by patch size " + std::to_string(patch_size) +
                  "; valid resolutions: any multiple of " + std::to_string(patch_size) +
                  " per side, e.g. " + (valid.empty() ? std::string("none of the presets") : valid));
    }
  }
};

/// Per-frame token block: M patch tokens followed by R register tokens.
struct TokenMatrix {
  std::uint64_t frame_id = 0;
  Matrix tokens;
  std::size_t patch_count = 0;     // M
  std::size_t register_count = 0;  // R
  std::size_t grid_rows = 0;       // patches along the image height
  std::size_t grid_cols = 0;       // patches along the image width

  std::size_t token_count() const noexcept { return patch_count + register_count; }
  std::size_t width() const noexcept { return tokens.cols(); }

  /// Same layout, different values.
  TokenMatrix with_tokens(Matrix m) const {
    TokenMatrix out = *this;
    out.tokens = std::move(m);
    return out;
  }
};

struct Bidirectional {};
struct KeyframeBlocked {
  std::uint64_t query_frame_id;
};
using MaskMode = std::variant<Bidirectional, KeyframeBlocked>;

/// Multiply-accumulate counts in attention score computation (Q K^T).
struct OpCounter {
  std::uint64_t framewise_score_macs = 0;
  std::vector<std::uint64_t> global_score_macs;  // one entry per global layer

  std::uint64_t total_global() const {
    std::uint64_t s = 0;
    for (auto v : global_score_macs) s += v;
    return s;
  }
};

/// Projected keys and values of one global layer, rows ordered by frame then
/// token.
struct LayerKv {
  Matrix k;
  Matrix v;
  friend bool operator==(const LayerKv&, const LayerKv&) = default;
};

struct ForwardOptions {
  bool capture_kv = false;
  bool record_layers = false;
  OpCounter* counter = nullptr;
};

struct ForwardResult {
  std::vector<TokenMatrix> frames;
  std::vector<LayerKv> kv;                         // per global layer, when captured
  std::vector<std::vector<TokenMatrix>> layers;    // per layer outputs, when recorded
};

/// Row-wise (x - mean) / sqrt(var + eps), no affine parameters.
inline Matrix normalize_rows(const Matrix& x, float eps = 1e-5f) {
  Matrix out(x.rows(), x.cols());
  const float n = static_cast<float>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    float mean = 0.0f;
    for (float v : in) mean += v;
    mean /= n;
    float var = 0.0f;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= n;
    const float inv = 1.0f / std::sqrt(var + eps);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) dst[c] = (in[c] - mean) * inv;
  }
  return out;
}

inline void add_inplace(Matrix& acc, const Matrix& delta) {
  auto a = acc.data();
  const auto d = delta.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += d[i];
}

/// Toy multi-view feature aggregator. Layers are numbered 1..L; odd layers
/// attend within a frame, even layers attend across frames. Weights are
/// immutable after construction, so one instance can serve concurrent
/// forward passes.
class Aggregator {
 public:
  explicit Aggregator(AggregatorConfig config) : config_(config) {
    config_.validate();
    const std::size_t patch_dim = 3 * config_.patch_size * config_.patch_size;
    patch_embed_ = seeded_uniform(patch_dim, config_.d_k,
                                  1.0f / std::sqrt(static_cast<float>(patch_dim)),
                                  config_.seed, 0, "patch_embed");
    registers_ = seeded_uniform(config_.num_register_tokens, config_.d_k, 1.0f,
                                config_.seed, 0, "register_tokens");
    layers_.reserve(config_.num_layers);
    for (std::size_t l = 1; l <= config_.num_layers; ++l) {
      layers_.push_back(ProjectionWeights::seeded(config_.d_k, l, config_.seed));
    }
  }

  const AggregatorConfig& config() const noexcept { return config_; }

  static bool is_global_layer(std::size_t layer) noexcept { return layer % 2 == 0; }

  const ProjectionWeights& layer_weights(std::size_t layer) const {
    if (layer < 1 || layer > layers_.size()) {
      throw Error("layer index " + std::to_string(layer) + " outside 1.." +
                  std::to_string(layers_.size()));
    }
    return layers_[layer - 1];
  }

  /// Patchify, scale pixels to [0,1], project to d_k, add the within-frame
  /// sinusoidal position signal, append register tokens.
  TokenMatrix encode_frame(const Image& image, std::uint64_t frame_id = 0) const {
    config_.validate_resolution(image.width, image.height);
    const std::size_t p = config_.patch_size;
    const std::size_t grid_rows = image.height / p;
    const std::size_t grid_cols = image.width / p;
    const std::size_t m = grid_rows * grid_cols;
    const std::size_t d = config_.d_k;

    Matrix patches(m, 3 * p * p);
    for (std::size_t gr = 0; gr < grid_rows; ++gr) {
      for (std::size_t gc = 0; gc < grid_cols; ++gc) {
        auto dst = patches.row(gr * grid_cols + gc);
        std::size_t k = 0;
        for (std::size_t y = 0; y < p; ++y) {
          const std::uint8_t* src = image.pixel(gc * p, gr * p + y);
          for (std::size_t x = 0; x < 3 * p; ++x) dst[k++] = src[x] / 255.0f;
        }
      }
    }
    Matrix tokens = matmul(patches, patch_embed_);
    if (config_.positional_encoding) {
      const Matrix pe = positional_table(m, d);
      add_inplace(tokens, pe);
    }
    tokens.append_rows(registers_);
    return {frame_id, std::move(tokens), m, config_.num_register_tokens, grid_rows, grid_cols};
  }

  /// Sinusoidal signal indexed by patch position within a frame.
  static Matrix positional_table(std::size_t count, std::size_t d) {
    Matrix pe(count, d);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double freq =
            std::pow(10000.0, -static_cast<double>(j - j % 2) / static_cast<double>(d));
        const double angle = static_cast<double>(i) * freq;
        pe(i, j) = static_cast<float>(0.5 * (j % 2 == 0 ? std::sin(angle) : std::cos(angle)));
      }
    }
    return pe;
  }

  TokenMatrix framewise_layer(const TokenMatrix& frame, std::size_t layer,
                              OpCounter* counter = nullptr) const {
    if (is_global_layer(layer)) {
      throw Error("layer " + std::to_string(layer) + " is a global layer, not frame-wise");
    }
    check_width(frame);
    const auto qkv = project_qkv(normalize_rows(frame.tokens), layer_weights(layer));
    Matrix out = frame.tokens;
    add_inplace(out, scaled_attention(qkv.q, qkv.k, qkv.v,
                                      counter ? &counter->framewise_score_macs : nullptr));
    return frame.with_tokens(std::move(out));
  }

  /// One global layer over a joint batch. With KeyframeBlocked, the query
  /// frame attends to every token while all other frames attend only to
  /// non-query frames.
  std::vector<TokenMatrix> global_layer_joint(std::span<const TokenMatrix> frames,
                                              std::size_t layer, const MaskMode& mode,
                                              OpCounter* counter = nullptr,
                                              LayerKv* capture = nullptr) const {
    if (!is_global_layer(layer)) {
      throw Error("layer " + std::to_string(layer) + " is a frame-wise layer, not global");
    }
    if (frames.empty()) throw Error("global layer needs at least one frame");
    const std::size_t rows = frames.front().token_count();
    for (const auto& f : frames) {
      check_width(f);
      if (f.token_count() != rows) throw Error("all frames must have the same token count");
    }

    std::optional<std::size_t> query_index;
    if (const auto* blocked = std::get_if<KeyframeBlocked>(&mode)) {
      for (std::size_t i = 0; i < frames.size(); ++i) {
        if (frames[i].frame_id == blocked->query_frame_id) query_index = i;
      }
      if (!query_index) {
        throw Error("query frame " + std::to_string(blocked->query_frame_id) +
                    " is not in the joint batch");
      }
    }

    const auto& w = layer_weights(layer);
    std::vector<Qkv> projected;
    projected.reserve(frames.size());
    for (const auto& f : frames) projected.push_back(project_qkv(normalize_rows(f.tokens), w));

    std::vector<KvView> all;
    std::vector<KvView> keyframes_only;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      all.push_back({&projected[i].k, &projected[i].v});
      if (!query_index || i != *query_index) {
        keyframes_only.push_back({&projected[i].k, &projected[i].v});
      }
    }

    std::uint64_t* macs = nullptr;
    if (counter) {
      counter->global_score_macs.resize(config_.num_global_layers(), 0);
      macs = &counter->global_score_macs[layer / 2 - 1];
    }

    std::vector<TokenMatrix> out;
    out.reserve(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const bool sees_all = !query_index || i == *query_index;
      const auto& blocks = sees_all ? all : keyframes_only;
      Matrix tokens = frames[i].tokens;
      add_inplace(tokens, attend_blocks(projected[i].q, blocks, macs));
      out.push_back(frames[i].with_tokens(std::move(tokens)));
    }

    if (capture) {
      capture->k = Matrix();
      capture->v = Matrix();
      for (const auto& p : projected) {
        capture->k.append_rows(p.k);
        capture->v.append_rows(p.v);
      }
    }
    return out;
  }

  ForwardResult forward(std::span<const TokenMatrix> frames, const MaskMode& mode,
                        const ForwardOptions& options = {}) const {
    if (frames.empty()) throw Error("aggregate_forward needs at least one frame");
    ForwardResult result;
    result.frames.assign(frames.begin(), frames.end());
    for (std::size_t layer = 1; layer <= config_.num_layers; ++layer) {
      if (is_global_layer(layer)) {
        LayerKv kv;
        result.frames = global_layer_joint(result.frames, layer, mode, options.counter,
                                           options.capture_kv ? &kv : nullptr);
        if (options.capture_kv) result.kv.push_back(std::move(kv));
      } else {
        for (auto& f : result.frames) f = framewise_layer(f, layer, options.counter);
      }
      if (options.record_layers) result.layers.push_back(result.frames);
    }
    return result;
  }

 private:
  void check_width(const TokenMatrix& f) const {
    if (f.width() != config_.d_k) {
      throw Error("token width " + std::to_string(f.width()) + " does not match d_k " +
                  std::to_string(config_.d_k));
    }
    if (f.tokens.rows() != f.token_count()) throw Error("token matrix row count mismatch");
  }

  AggregatorConfig config_;
  Matrix patch_embed_;
  Matrix registers_;
  std::vector<ProjectionWeights> layers_;
};

/// Free-function form of Aggregator::forward.
inline ForwardResult aggregate_forward(const Aggregator& aggregator,
                                       std::span<const TokenMatrix> frames,
                                       const MaskMode& mode, bool capture_kv) {
  return aggregator.forward(frames, mode, {.capture_kv = capture_kv});
}

}  // namespace kvtrack
