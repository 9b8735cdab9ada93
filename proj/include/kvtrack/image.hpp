#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kvtrack/matrix.hpp"
#include "kvtrack/random.hpp"

namespace kvtrack {

/// Interleaved 8-bit RGB raster, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), rgb(w * h * 3, fill) {}

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return &rgb[(y * width + x) * 3]; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const {
    return &rgb[(y * width + x) * 3];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Single-channel binary mask; nonzero keeps the pixel.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> keep;

  Mask() = default;
  Mask(std::size_t w, std::size_t h, std::uint8_t fill = 1)
      : width(w), height(h), keep(w * h, fill) {}
};

inline Image apply_mask(const Image& image, const Mask& mask) {
  if (image.width != mask.width || image.height != mask.height) {
    throw Error("mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                " does not match image " + std::to_string(image.width) + "x" +
                std::to_string(image.height));
  }
  Image out = image;
  for (std::size_t i = 0; i < mask.keep.size(); ++i) {
    if (mask.keep[i] == 0) {
      out.rgb[i * 3 + 0] = 0;
      out.rgb[i * 3 + 1] = 0;
      out.rgb[i * 3 + 2] = 0;
    }
  }
  return out;
}

inline std::uint64_t image_hash(const Image& image) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : image.rgb) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h ^ mix64(image.width * 0x10000 + image.height);
}

namespace detail {

inline std::string next_pnm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

struct PnmHeader {
  std::string magic;
  std::size_t width;
  std::size_t height;
};

inline PnmHeader read_pnm_header(std::istream& in, const std::filesystem::path& path) {
  PnmHeader h;
  h.magic = next_pnm_token(in);
  if (h.magic != "P6" && h.magic != "P5") {
    throw Error(path.string() + ": unsupported image format (expected binary PPM/PGM)");
  }
  try {
    h.width = std::stoul(next_pnm_token(in));
    h.height = std::stoul(next_pnm_token(in));
    const auto maxval = std::stoul(next_pnm_token(in));
    if (maxval != 255) throw Error(path.string() + ": only 8-bit PNM is supported");
  } catch (const std::logic_error&) {
    throw Error(path.string() + ": malformed PNM header");
  }
  return h;
}

inline std::vector<std::uint8_t> read_pnm_payload(std::istream& in, std::size_t bytes,
                                                  const std::filesystem::path& path) {
  std::vector<std::uint8_t> buf(bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) {
    throw Error(path.string() + ": truncated image data");
  }
  return buf;
}

}  // namespace detail

/// Reads binary PPM (P6) or PGM (P5, replicated to RGB).
inline Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  const auto h = detail::read_pnm_header(in, path);
  Image img(h.width, h.height);
  if (h.magic == "P6") {
    img.rgb = detail::read_pnm_payload(in, h.width * h.height * 3, path);
  } else {
    const auto gray = detail::read_pnm_payload(in, h.width * h.height, path);
    for (std::size_t i = 0; i < gray.size(); ++i) {
      img.rgb[i * 3] = img.rgb[i * 3 + 1] = img.rgb[i * 3 + 2] = gray[i];
    }
  }
  return img;
}

/// Reads a PGM or PPM mask; a pixel is kept when any channel is nonzero.
inline Mask read_mask(const std::filesystem::path& path) {
  const Image img = read_image(path);
  Mask m(img.width, img.height, 0);
  for (std::size_t i = 0; i < m.keep.size(); ++i) {
    m.keep[i] = (img.rgb[i * 3] | img.rgb[i * 3 + 1] | img.rgb[i * 3 + 2]) != 0 ? 1 : 0;
  }
  return m;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
}

inline void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  for (auto k : mask.keep) out.put(k ? static_cast<char>(255) : '\0');
}

}  // namespace kvtrack
