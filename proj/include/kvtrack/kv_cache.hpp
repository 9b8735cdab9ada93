#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "kvtrack/aggregator.hpp"
#include "kvtrack/geometry.hpp"

namespace kvtrack {

/// Cached keys and values of every global layer for a set of keyframes.
/// Treated as immutable once published; shared as shared_ptr<const KvCache>.
struct KvCache {
  std::uint64_t generation = 0;  // 0 until published
  std::vector<std::uint64_t> keyframe_ids;
  std::size_t num_layers = 0;  // L of the aggregator (global layers = L / 2)
  std::size_t patch_count = 0;
  std::size_t register_count = 0;
  std::size_t d_k = 0;
  std::vector<LayerKv> layers;  // one per global layer
  /// Decoded pose of the first keyframe, used to express poses relative to it.
  Pose gauge = Pose::identity();

  std::size_t num_keyframes() const noexcept { return keyframe_ids.size(); }
  std::size_t tokens_per_frame() const noexcept { return patch_count + register_count; }
  std::size_t rows_per_layer() const noexcept { return num_keyframes() * tokens_per_frame(); }

  void check_invariants() const {
    if (num_keyframes() == 0) throw Error("cache has no keyframes");
    if (layers.size() != num_layers / 2 || layers.empty()) {
      throw Error("cache layer count does not match the aggregator depth");
    }
    for (const auto& l : layers) {
      if (l.k.rows() != rows_per_layer() || l.v.rows() != rows_per_layer() ||
          l.k.cols() != d_k || l.v.cols() != d_k) {
        throw Error("cache block shape does not equal B*(M+R) x d_k");
      }
    }
  }
};

using CachePtr = std::shared_ptr<const KvCache>;

struct BuiltCache {
  KvCache cache;
  std::vector<TokenMatrix> final_tokens;
};

/// Full bidirectional forward over the keyframes, capturing every global
/// layer's K and V. Row order is keyframe order, then token order.
inline BuiltCache build_cache(std::span<const TokenMatrix> keyframes,
                              const Aggregator& aggregator, OpCounter* counter = nullptr) {
  if (keyframes.empty()) throw Error("cannot build a cache from an empty keyframe set");
  auto fwd = aggregator.forward(keyframes, Bidirectional{},
                                {.capture_kv = true, .counter = counter});
  BuiltCache out;
  auto& c = out.cache;
  for (const auto& k : keyframes) c.keyframe_ids.push_back(k.frame_id);
  c.num_layers = aggregator.config().num_layers;
  c.patch_count = keyframes.front().patch_count;
  c.register_count = keyframes.front().register_count;
  c.d_k = aggregator.config().d_k;
  c.layers = std::move(fwd.kv);
  out.final_tokens = std::move(fwd.frames);
  return out;
}

struct CachedQueryResult {
  TokenMatrix tokens;
  std::vector<TokenMatrix> layers;  // per-layer outputs, when recorded
};

/// Runs the full stack on a single query frame; at each global layer the
/// query attends to [cached K; own K] with values [cached V; own V]. The cache
/// is only read.
inline CachedQueryResult attend_with_cache(const TokenMatrix& query, const KvCache& cache,
                                           const Aggregator& aggregator,
                                           const ForwardOptions& options = {}) {
  const auto& cfg = aggregator.config();
  if (cache.num_keyframes() == 0 || cache.layers.empty()) {
    throw Error("attend_with_cache: cache is empty");
  }
  if (cache.num_layers != cfg.num_layers || cache.d_k != cfg.d_k) {
    throw Error("attend_with_cache: cache was built with a different aggregator (L=" +
                std::to_string(cache.num_layers) + ", d_k=" + std::to_string(cache.d_k) + ")");
  }
  if (query.width() != cache.d_k) {
    throw Error("attend_with_cache: query width " + std::to_string(query.width()) +
                " does not match cache d_k " + std::to_string(cache.d_k));
  }
  if (query.token_count() != cache.tokens_per_frame()) {
    throw Error("attend_with_cache: query has " + std::to_string(query.token_count()) +
                " tokens per frame, cache has " + std::to_string(cache.tokens_per_frame()));
  }

  OpCounter* counter = options.counter;
  if (counter) counter->global_score_macs.resize(cfg.num_global_layers(), 0);

  CachedQueryResult result{query, {}};
  for (std::size_t layer = 1; layer <= cfg.num_layers; ++layer) {
    if (Aggregator::is_global_layer(layer)) {
      const std::size_t g = layer / 2 - 1;
      const auto qkv = project_qkv(normalize_rows(result.tokens.tokens),
                                   aggregator.layer_weights(layer));
      const KvView blocks[] = {{&cache.layers[g].k, &cache.layers[g].v}, {&qkv.k, &qkv.v}};
      Matrix out = result.tokens.tokens;
      add_inplace(out, attend_blocks(qkv.q, blocks,
                                     counter ? &counter->global_score_macs[g] : nullptr));
      result.tokens.tokens = std::move(out);
    } else {
      result.tokens = aggregator.framewise_layer(result.tokens, layer, counter);
    }
    if (options.record_layers) result.layers.push_back(result.tokens);
  }
  return result;
}

/// Columns of the query score matrix at each global layer: (B + 1)(M + R).
inline std::size_t cached_score_columns(const KvCache& cache) {
  return (cache.num_keyframes() + 1) * cache.tokens_per_frame();
}

/// Bytes held by all cached K and V blocks.
inline std::size_t memory_footprint(const KvCache& cache) {
  return 2 * cache.layers.size() * cache.rows_per_layer() * cache.d_k * sizeof(float);
}

/// FNV-1a over the cache content (ids, shapes, gauge, float bits). The
/// generation id is excluded so a rolled-back cache hashes like its source.
inline std::uint64_t content_hash(const KvCache& cache) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::uint64_t dims[] = {cache.num_layers, cache.patch_count, cache.register_count,
                                cache.d_k, cache.keyframe_ids.size()};
  feed(dims, sizeof dims);
  feed(cache.keyframe_ids.data(), cache.keyframe_ids.size() * sizeof(std::uint64_t));
  feed(cache.gauge.rotation.data(), 9 * sizeof(double));
  feed(cache.gauge.translation.data(), 3 * sizeof(double));
  for (const auto& l : cache.layers) {
    feed(l.k.data().data(), l.k.size() * sizeof(float));
    feed(l.v.data().data(), l.v.size() * sizeof(float));
  }
  return h;
}

/// Holds the currently published cache plus one prior snapshot. Publication
/// and rollback replace the current pointer under a lock; readers take a
/// shared_ptr copy and never see a partially built cache.
class CacheStore {
 public:
  /// Publishes `cache` under a fresh generation; the previously published
  /// cache becomes the rollback target.
  CachePtr publish(KvCache cache) {
    std::lock_guard lock(mutex_);
    cache.generation = ++last_generation_;
    previous_ = current_;
    current_ = std::make_shared<const KvCache>(std::move(cache));
    return current_;
  }

  CachePtr current() const {
    std::lock_guard lock(mutex_);
    return current_;
  }

  /// The current cache; immutable, so holding the pointer is the snapshot.
  CachePtr snapshot() const {
    auto c = current();
    if (!c) throw Error("no published cache to snapshot");
    return c;
  }

  /// Republishes the content of the previous cache under a new generation.
  /// Only one level of undo is kept.
  CachePtr rollback() {
    std::lock_guard lock(mutex_);
    if (!previous_) throw Error("rollback: no previous cache to revert to");
    KvCache restored = *previous_;
    restored.generation = ++last_generation_;
    current_ = std::make_shared<const KvCache>(std::move(restored));
    previous_.reset();
    return current_;
  }

  std::uint64_t last_generation() const {
    std::lock_guard lock(mutex_);
    return last_generation_;
  }

 private:
  mutable std::mutex mutex_;
  CachePtr current_;
  CachePtr previous_;
  std::uint64_t last_generation_ = 0;
};

// Binary cache file, all fields little-endian:
//   magic "KVTC" | u32 version | u32 L | u32 B | u32 M | u32 R | u32 d_k |
//   u64 generation | u64 keyframe_ids[B] | f64 gauge R (row-major, 9) |
//   f64 gauge t (3) | per global layer: f32 K[B(M+R) x d_k], f32 V[...]
inline constexpr char kCacheMagic[4] = {'K', 'V', 'T', 'C'};
inline constexpr std::uint32_t kCacheVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "cache serialization assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error("cache file truncated");
  return value;
}

}  // namespace detail

inline void write_cache(std::ostream& out, const KvCache& cache) {
  cache.check_invariants();
  out.write(kCacheMagic, 4);
  detail::put<std::uint32_t>(out, kCacheVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(cache.num_layers));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(cache.num_keyframes()));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(cache.patch_count));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(cache.register_count));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(cache.d_k));
  detail::put<std::uint64_t>(out, cache.generation);
  for (auto id : cache.keyframe_ids) detail::put<std::uint64_t>(out, id);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) detail::put<double>(out, cache.gauge.rotation(r, c));
  }
  for (int i = 0; i < 3; ++i) detail::put<double>(out, cache.gauge.translation(i));
  for (const auto& l : cache.layers) {
    out.write(reinterpret_cast<const char*>(l.k.data().data()),
              static_cast<std::streamsize>(l.k.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(l.v.data().data()),
              static_cast<std::streamsize>(l.v.size() * sizeof(float)));
  }
  if (!out) throw Error("failed writing cache");
}

inline KvCache read_cache(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCacheMagic, 4) != 0) throw Error("not a kvtrack cache file");
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCacheVersion) {
    throw Error("unsupported cache version " + std::to_string(version));
  }
  KvCache c;
  c.num_layers = detail::get<std::uint32_t>(in);
  const auto b = detail::get<std::uint32_t>(in);
  c.patch_count = detail::get<std::uint32_t>(in);
  c.register_count = detail::get<std::uint32_t>(in);
  c.d_k = detail::get<std::uint32_t>(in);
  c.generation = detail::get<std::uint64_t>(in);
  if (c.num_layers < 2 || c.num_layers % 2 != 0 || b == 0 || c.d_k == 0) {
    throw Error("cache header is inconsistent");
  }
  for (std::uint32_t i = 0; i < b; ++i) c.keyframe_ids.push_back(detail::get<std::uint64_t>(in));
  for (int r = 0; r < 3; ++r) {
    for (int col = 0; col < 3; ++col) c.gauge.rotation(r, col) = detail::get<double>(in);
  }
  for (int i = 0; i < 3; ++i) c.gauge.translation(i) = detail::get<double>(in);
  const std::size_t rows = c.rows_per_layer();
  auto read_block = [&] {
    Matrix m(rows, c.d_k);
    in.read(reinterpret_cast<char*>(m.data().data()),
            static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!in) throw Error("cache file truncated");
    return m;
  };
  for (std::size_t g = 0; g < c.num_layers / 2; ++g) {
    LayerKv l;
    l.k = read_block();
    l.v = read_block();
    c.layers.push_back(std::move(l));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes after cache data");
  return c;
}

inline void save_cache(const std::filesystem::path& path, const KvCache& cache) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write cache file " + path.string());
  write_cache(out, cache);
}

inline KvCache load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open cache file " + path.string());
  return read_cache(in);
}

}  // namespace kvtrack
