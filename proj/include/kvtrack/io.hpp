#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kvtrack/aggregator.hpp"
#include "kvtrack/evaluation.hpp"
#include "kvtrack/heads.hpp"
#include "kvtrack/image.hpp"
#include "kvtrack/keyframe.hpp"

namespace kvtrack {

struct Frame {
  std::uint64_t frame_id = 0;
  double timestamp = 0.0;
  Image image;  // background already masked to black when a mask was given
};

struct ManifestEntry {
  double timestamp = 0.0;
  std::filesystem::path image;
  std::optional<std::filesystem::path> mask;
};

struct SequenceManifest {
  std::vector<ManifestEntry> entries;  // sorted by timestamp
  std::optional<std::filesystem::path> groundtruth;
  std::optional<Resolution> resolution;
};

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline Resolution parse_resolution(const std::string& text) {
  const auto x = text.find('x');
  Resolution r;
  if (x == std::string::npos) throw Error("bad resolution '" + text + "', expected WxH");
  const auto* b = text.data();
  auto [p1, e1] = std::from_chars(b, b + x, r.width);
  auto [p2, e2] = std::from_chars(b + x + 1, b + text.size(), r.height);
  if (e1 != std::errc{} || e2 != std::errc{} || p1 != b + x || p2 != b + text.size() ||
      r.width == 0 || r.height == 0) {
    throw Error("bad resolution '" + text + "', expected WxH");
  }
  return r;
}

inline std::string format_resolution(const Resolution& r) {
  return std::to_string(r.width) + "x" + std::to_string(r.height);
}

/// Width and height from a PNM header without reading the pixels.
inline Resolution image_size(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  const auto h = detail::read_pnm_header(in, path);
  return {h.width, h.height};
}

/// Line-oriented manifest:
///   timestamp image_path [mask_path]
///   @groundtruth path
///   @resolution WxH
/// Paths are relative to the manifest's directory. '#' starts a comment.
inline SequenceManifest parse_manifest(std::istream& in, const std::filesystem::path& base,
                                       const std::string& name = "manifest") {
  SequenceManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    const std::string where = name + ":" + std::to_string(lineno);
    if (line[0] == '@') {
      std::string key, value;
      ls >> key >> value;
      if (value.empty()) throw Error(where + ": directive without a value");
      if (key == "@groundtruth") {
        m.groundtruth = base / value;
      } else if (key == "@resolution") {
        m.resolution = parse_resolution(value);
      } else {
        throw Error(where + ": unknown directive " + key);
      }
      continue;
    }
    ManifestEntry e;
    std::string img, mask;
    if (!(ls >> e.timestamp >> img)) throw Error(where + ": expected 'timestamp path [mask]'");
    e.image = base / img;
    if (ls >> mask) e.mask = base / mask;
    m.entries.push_back(std::move(e));
  }
  std::stable_sort(m.entries.begin(), m.entries.end(),
                   [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  for (std::size_t i = 1; i < m.entries.size(); ++i) {
    if (m.entries[i].timestamp == m.entries[i - 1].timestamp) {
      throw Error(name + ": duplicate timestamp in entry " + m.entries[i].image.string());
    }
  }
  return m;
}

/// Parses and validates a manifest up front: every referenced file must be
/// readable and every image and mask must share one resolution.
inline SequenceManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  auto m = parse_manifest(in, path.parent_path(), path.string());
  if (m.entries.empty()) throw Error(path.string() + ": manifest lists no frames");
  std::optional<Resolution> seen = m.resolution;
  for (const auto& e : m.entries) {
    if (!std::filesystem::exists(e.image)) throw Error("missing image " + e.image.string());
    const auto r = image_size(e.image);
    if (seen && !(r == *seen)) {
      throw Error("image " + e.image.string() + " is " + format_resolution(r) + ", expected " +
                  format_resolution(*seen));
    }
    seen = r;
    if (e.mask) {
      if (!std::filesystem::exists(*e.mask)) throw Error("missing mask " + e.mask->string());
      const auto mr = image_size(*e.mask);
      if (!(mr == r)) {
        throw Error("mask " + e.mask->string() + " is " + format_resolution(mr) +
                    " but its image is " + format_resolution(r));
      }
    }
  }
  if (m.groundtruth && !std::filesystem::exists(*m.groundtruth)) {
    throw Error("missing ground truth " + m.groundtruth->string());
  }
  m.resolution = seen;
  return m;
}

/// Pull-based frame stream.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::optional<Frame> next() = 0;
};

class VectorSource : public FrameSource {
 public:
  explicit VectorSource(std::vector<Frame> frames) : frames_(std::move(frames)) {}
  std::optional<Frame> next() override {
    if (pos_ >= frames_.size()) return std::nullopt;
    return frames_[pos_++];
  }

 private:
  std::vector<Frame> frames_;
  std::size_t pos_ = 0;
};

/// Decodes manifest frames lazily, applying masks.
class ManifestSource : public FrameSource {
 public:
  explicit ManifestSource(SequenceManifest manifest) : manifest_(std::move(manifest)) {}
  std::optional<Frame> next() override {
    if (pos_ >= manifest_.entries.size()) return std::nullopt;
    const auto& e = manifest_.entries[pos_];
    Frame f{pos_, e.timestamp, read_image(e.image)};
    if (e.mask) f.image = apply_mask(f.image, read_mask(*e.mask));
    ++pos_;
    return f;
  }
  const SequenceManifest& manifest() const noexcept { return manifest_; }

 private:
  SequenceManifest manifest_;
  std::size_t pos_ = 0;
};

inline std::vector<Frame> drain(FrameSource& source) {
  std::vector<Frame> out;
  while (auto f = source.next()) out.push_back(std::move(*f));
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline configuration

struct PipelineConfig {
  AggregatorConfig aggregator;
  KeyframePolicy policy = FixedInterval{50};
  HeadConfig heads = HeadConfig::pose_only();
  std::optional<Resolution> resolution;
  double confidence_floor = 0.5;  // for point-cloud fusion
  RejectionPolicy rejection;
  PivotRule pivot;
  std::filesystem::path trajectory_path;
  std::filesystem::path ply_path;
  std::filesystem::path log_path;

  void set(const std::string& key, const std::string& value);

  void validate() const {
    aggregator.validate();
    validate_policy(policy);
    if (resolution) aggregator.validate_resolution(resolution->width, resolution->height);
  }
};

inline HeadConfig parse_heads(const std::string& text) {
  if (text == "pose") return HeadConfig::pose_only();
  if (text == "all") return HeadConfig::all();
  HeadConfig h{true, false, false};
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item == "pose") continue;
    if (item == "points") h.decode_points = true;
    else if (item == "confidence") h.decode_confidence = true;
    else throw Error("unknown head '" + item + "' (expected pose, points, confidence, all)");
  }
  return h;
}

namespace detail {

inline std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) {
    throw Error("config " + key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw Error("config " + key + ": expected a number, got '" + v + "'");
  }
}

}  // namespace detail

inline void PipelineConfig::set(const std::string& key, const std::string& value) {
  using detail::to_double;
  using detail::to_size;
  if (key == "seed") {
    aggregator.seed = to_size(key, value);
  } else if (key == "num_layers") {
    aggregator.num_layers = to_size(key, value);
  } else if (key == "d_k") {
    aggregator.d_k = to_size(key, value);
  } else if (key == "patch_size") {
    aggregator.patch_size = to_size(key, value);
  } else if (key == "num_register_tokens") {
    aggregator.num_register_tokens = to_size(key, value);
  } else if (key == "positional_encoding") {
    aggregator.positional_encoding = value == "1" || value == "true";
  } else if (key == "resolution") {
    resolution = parse_resolution(value);
  } else if (key == "policy") {
    if (value == "interval") {
      policy = FixedInterval{std::holds_alternative<FixedInterval>(policy)
                                 ? std::get<FixedInterval>(policy).stride
                                 : 50};
    } else if (value == "angular") {
      policy = AngularThreshold{std::holds_alternative<AngularThreshold>(policy)
                                    ? std::get<AngularThreshold>(policy).tau
                                    : deg2rad(10.0)};
    } else {
      throw Error("policy must be 'interval' or 'angular', got '" + value + "'");
    }
  } else if (key == "stride") {
    policy = FixedInterval{to_size(key, value)};
  } else if (key == "tau_deg") {
    policy = AngularThreshold{deg2rad(to_double(key, value))};
  } else if (key == "heads") {
    heads = parse_heads(value);
  } else if (key == "confidence_floor") {
    confidence_floor = to_double(key, value);
  } else if (key == "rejection_percentile") {
    rejection.percentile = to_double(key, value);
  } else if (key == "rejection_min") {
    rejection.absolute_floor = to_double(key, value);
  } else if (key == "pivot") {
    if (value == "first_keyframe") {
      pivot.kind = PivotRule::Kind::first_keyframe_origin;
    } else if (value == "centroid") {
      pivot.kind = PivotRule::Kind::fused_centroid;
    } else {
      std::istringstream ss(value);
      std::string part;
      double xyz[3];
      for (double& c : xyz) {
        if (!std::getline(ss, part, ',')) throw Error("pivot must be first_keyframe, centroid or x,y,z");
        c = to_double(key, trim(part));
      }
      pivot = {PivotRule::Kind::fixed, Vec3(xyz[0], xyz[1], xyz[2])};
    }
  } else if (key == "trajectory") {
    trajectory_path = value;
  } else if (key == "ply") {
    ply_path = value;
  } else if (key == "log") {
    log_path = value;
  } else {
    throw Error("unknown config key '" + key + "'");
  }
}

/// key=value lines; '#' comments.
inline PipelineConfig parse_config(std::istream& in, PipelineConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error("config line " + std::to_string(lineno) + ": expected key=value");
    }
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

inline PipelineConfig load_config(const std::filesystem::path& path, PipelineConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  return parse_config(in, std::move(base));
}

// ---------------------------------------------------------------------------
// Synthetic orbit around a flat-shaded cube

struct OrbitParams {
  double radius = 1.0;
  double angular_step = std::numbers::pi / 18.0;  // radians per frame
  std::size_t frame_count = 36;
  Vec3 pivot = Vec3::Zero();
  double start_azimuth = 0.0;
  // elevation(i) = elevation + elevation_amplitude * sin(2 pi i / elevation_period)
  double elevation = 0.0;
  double elevation_amplitude = 0.0;
  double elevation_period = 36.0;
  std::size_t width = 56;
  std::size_t height = 56;
  double cube_half_size = 0.25;
  double fps = 30.0;
  bool with_masks = false;
};

struct SyntheticSequence {
  std::vector<Frame> frames;
  std::vector<Mask> masks;  // object masks, when requested
  Trajectory groundtruth;
};

/// Camera-to-world pose of a camera at `center` looking at `target`, with
/// x right, y down, z forward and world +z as up.
inline Pose look_at(const Vec3& center, const Vec3& target) {
  const Vec3 z = (target - center).normalized();
  Vec3 up(0.0, 0.0, 1.0);
  if (std::abs(z.dot(up)) > 1.0 - 1e-9) up = Vec3(0.0, 1.0, 0.0);
  const Vec3 x = z.cross(up).normalized();
  const Vec3 y = z.cross(x);
  Pose p;
  p.rotation.col(0) = x;
  p.rotation.col(1) = y;
  p.rotation.col(2) = z;
  p.translation = center;
  return p;
}

namespace detail {

inline Image render_cube(const Pose& cam, const Vec3& center, double half, std::size_t w,
                         std::size_t h, Mask* mask) {
  static constexpr std::uint8_t kFace[6][3] = {{220, 60, 50},  {60, 180, 75},  {50, 90, 220},
                                               {240, 200, 40}, {200, 70, 200}, {40, 200, 210}};
  Image img(w, h, 0);
  if (mask) *mask = Mask(w, h, 0);
  const double f = 0.9 * static_cast<double>(w);
  const double cx = 0.5 * static_cast<double>(w);
  const double cy = 0.5 * static_cast<double>(h);
  const Vec3 lo = center - Vec3::Constant(half);
  const Vec3 hi = center + Vec3::Constant(half);
  for (std::size_t v = 0; v < h; ++v) {
    for (std::size_t u = 0; u < w; ++u) {
      const Vec3 ray_cam((static_cast<double>(u) + 0.5 - cx) / f,
                         (static_cast<double>(v) + 0.5 - cy) / f, 1.0);
      const Vec3 dir = (cam.rotation * ray_cam).normalized();
      double t_near = -std::numeric_limits<double>::infinity();
      double t_far = std::numeric_limits<double>::infinity();
      int face = -1;
      bool miss = false;
      for (int a = 0; a < 3 && !miss; ++a) {
        if (std::abs(dir(a)) < 1e-15) {
          miss = cam.translation(a) < lo(a) || cam.translation(a) > hi(a);
          continue;
        }
        double t0 = (lo(a) - cam.translation(a)) / dir(a);
        double t1 = (hi(a) - cam.translation(a)) / dir(a);
        int entry_face = 2 * a;  // entering through the low face
        if (t0 > t1) {
          std::swap(t0, t1);
          entry_face = 2 * a + 1;
        }
        if (t0 > t_near) {
          t_near = t0;
          face = entry_face;
        }
        t_far = std::min(t_far, t1);
      }
      if (miss || face < 0 || t_near > t_far || t_near <= 0.0) continue;
      Vec3 normal = Vec3::Zero();
      normal(face / 2) = face % 2 == 0 ? -1.0 : 1.0;
      const double shade = 0.4 + 0.6 * std::abs(normal.dot(dir));
      std::uint8_t* px = img.pixel(u, v);
      for (int c = 0; c < 3; ++c) {
        px[c] = static_cast<std::uint8_t>(std::lround(kFace[face][c] * shade));
      }
      if (mask) mask->keep[v * w + u] = 1;
    }
  }
  return img;
}

}  // namespace detail

inline SyntheticSequence synth_orbit(const OrbitParams& params) {
  if (!(params.radius > 0.0)) throw Error("orbit radius must be positive");
  if (params.frame_count < 1) throw Error("orbit needs at least one frame");
  SyntheticSequence seq;
  for (std::size_t i = 0; i < params.frame_count; ++i) {
    const double az = params.start_azimuth + static_cast<double>(i) * params.angular_step;
    const double el =
        params.elevation +
        params.elevation_amplitude *
            std::sin(2.0 * std::numbers::pi * static_cast<double>(i) / params.elevation_period);
    const Vec3 offset(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    const Pose pose = look_at(params.pivot + params.radius * offset, params.pivot);
    const double ts = static_cast<double>(i) / params.fps;
    Mask mask;
    Image img = detail::render_cube(pose, params.pivot, params.cube_half_size, params.width,
                                    params.height, params.with_masks ? &mask : nullptr);
    seq.frames.push_back({i, ts, std::move(img)});
    if (params.with_masks) seq.masks.push_back(std::move(mask));
    seq.groundtruth.poses.push_back({ts, pose});
  }
  return seq;
}

/// Writes frames (PPM), masks (PGM), ground truth (TUM) and a manifest into
/// `dir`; returns the manifest path.
inline std::filesystem::path write_sequence(const std::filesystem::path& dir,
                                            const SyntheticSequence& seq) {
  std::filesystem::create_directories(dir / "frames");
  if (!seq.masks.empty()) std::filesystem::create_directories(dir / "masks");
  save_tum(dir / "groundtruth.txt", seq.groundtruth);
  const auto manifest_path = dir / "manifest.txt";
  std::ofstream out(manifest_path);
  if (!out) throw Error("cannot write " + manifest_path.string());
  out << "@groundtruth groundtruth.txt\n";
  char name[64];
  char ts[32];
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& f = seq.frames[i];
    std::snprintf(name, sizeof name, "%06zu", i);
    std::snprintf(ts, sizeof ts, "%.6f", f.timestamp);
    write_ppm(dir / "frames" / (std::string(name) + ".ppm"), f.image);
    out << ts << " frames/" << name << ".ppm";
    if (!seq.masks.empty()) {
      write_pgm(dir / "masks" / (std::string(name) + ".pgm"), seq.masks[i]);
      out << " masks/" << name << ".pgm";
    }
    out << "\n";
  }
  return manifest_path;
}

}  // namespace kvtrack
