#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "kvtrack/matrix.hpp"
#include "kvtrack/random.hpp"

namespace kvtrack {

/// Row-wise softmax with per-row max subtraction.
inline Matrix softmax_rows(const Matrix& m) {
  if (!m.all_finite()) throw Error("non-finite logits");
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto in = m.row(r);
    auto dst = out.row(r);
    float peak = -std::numeric_limits<float>::infinity();
    for (float v : in) peak = std::max(peak, v);
    float sum = 0.0f;
    for (std::size_t c = 0; c < in.size(); ++c) {
      dst[c] = std::exp(in[c] - peak);
      sum += dst[c];
    }
    for (auto& v : dst) v /= sum;
  }
  return out;
}

/// Bias-free Q/K/V projections for one layer, each d_k x d_k.
struct ProjectionWeights {
  std::size_t layer_index = 0;
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;

  /// Uniform in [-1/sqrt(d_k), 1/sqrt(d_k)], keyed by (seed, layer, role).
  static ProjectionWeights seeded(std::size_t d_k, std::size_t layer_index,
                                  std::uint64_t seed) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(d_k));
    return {layer_index, seeded_uniform(d_k, d_k, bound, seed, layer_index, "w_q"),
            seeded_uniform(d_k, d_k, bound, seed, layer_index, "w_k"),
            seeded_uniform(d_k, d_k, bound, seed, layer_index, "w_v")};
  }

  std::size_t width() const noexcept { return w_q.rows(); }
};

struct Qkv {
  Matrix q;
  Matrix k;
  Matrix v;
};

inline Qkv project_qkv(const Matrix& x, const ProjectionWeights& w) {
  if (x.cols() != w.width()) {
    throw Error("project_qkv: token width " + std::to_string(x.cols()) +
                " does not match projection width " + std::to_string(w.width()));
  }
  return {matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)};
}

/// A key/value block that queries may attend to. Non-owning.
struct KvView {
  const Matrix* k;
  const Matrix* v;
};

/// softmax(q [K_1; ...; K_n]^T / sqrt(d_k)) [V_1; ...; V_n] without
/// materialising the concatenation. Keys are visited block by block in the
/// given order, so attending to {A, B} is arithmetically identical to
/// attending to vstack(A, B).
///
/// `score_macs`, when given, is incremented by q.rows * total_keys * d_k.
inline Matrix attend_blocks(const Matrix& q, std::span<const KvView> blocks,
                            std::uint64_t* score_macs = nullptr) {
  if (blocks.empty()) throw Error("attention needs at least one key block");
  const std::size_t d_k = q.cols();
  const std::size_t d_v = blocks.front().v->cols();
  std::size_t total_keys = 0;
  for (const auto& b : blocks) {
    if (b.k->cols() != d_k) throw Error("attention: key width does not match query width");
    if (b.k->rows() != b.v->rows()) throw Error("attention: key/value row mismatch");
    if (b.v->cols() != d_v) throw Error("attention: value width mismatch across blocks");
    total_keys += b.k->rows();
  }
  if (total_keys == 0) throw Error("attention: no keys");
  if (score_macs) *score_macs += static_cast<std::uint64_t>(q.rows()) * total_keys * d_k;

  const float scale = 1.0f / std::sqrt(static_cast<float>(d_k));
  Matrix out(q.rows(), d_v);
  std::vector<float> logits(total_keys);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto qi = q.row(i);
    std::size_t col = 0;
    for (const auto& b : blocks) {
      for (std::size_t j = 0; j < b.k->rows(); ++j) {
        const auto kj = b.k->row(j);
        float dot = 0.0f;
        for (std::size_t c = 0; c < d_k; ++c) dot += qi[c] * kj[c];
        logits[col++] = dot * scale;
      }
    }
    float peak = -std::numeric_limits<float>::infinity();
    for (float v : logits) {
      if (!std::isfinite(v)) throw Error("non-finite logits");
      peak = std::max(peak, v);
    }
    float sum = 0.0f;
    for (auto& v : logits) {
      v = std::exp(v - peak);
      sum += v;
    }
    const float inv = 1.0f / sum;
    auto dst = out.row(i);
    col = 0;
    for (const auto& b : blocks) {
      for (std::size_t j = 0; j < b.v->rows(); ++j) {
        const float p = logits[col++] * inv;
        const auto vj = b.v->row(j);
        for (std::size_t c = 0; c < d_v; ++c) dst[c] += p * vj[c];
      }
    }
  }
  return out;
}

/// softmax(q k^T / sqrt(d_k)) v.
inline Matrix scaled_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               std::uint64_t* score_macs = nullptr) {
  if (q.cols() != k.cols()) throw Error("scaled_attention: q/k width mismatch");
  if (k.rows() != v.rows()) throw Error("scaled_attention: k/v row mismatch");
  const KvView block{&k, &v};
  return attend_blocks(q, std::span<const KvView>(&block, 1), score_macs);
}

}  // namespace kvtrack
