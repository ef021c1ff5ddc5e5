#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <cctype>
#include <vector>

#include "ism3d/common.hpp"

namespace ism3d {

// Per-pixel depth in meters; kInvalidDepth (0) marks missing measurements,
// the Kinect convention.
inline constexpr float kInvalidDepth = 0.0f;

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<float> meters;

  DepthMap() = default;
  DepthMap(int w, int h, float fill = kInvalidDepth)
      : width(w), height(h), meters(static_cast<std::size_t>(w) * h, fill) {}

  float at(int x, int y) const { return meters[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return meters[static_cast<std::size_t>(y) * width + x]; }
  bool valid(int x, int y) const {
    const float d = at(x, y);
    return std::isfinite(d) && d > 0.0f;
  }
  bool operator==(const DepthMap&) const = default;
};

struct ImageRGBD {
  int width = 0;
  int height = 0;
  std::vector<float> intensity;  // luminance in [0,1], row-major
  std::optional<DepthMap> depth;

  ImageRGBD() = default;
  ImageRGBD(int w, int h, float fill = 0.0f)
      : width(w), height(h), intensity(static_cast<std::size_t>(w) * h, fill) {}

  bool empty() const { return width <= 0 || height <= 0; }
  float at(int x, int y) const { return intensity[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return intensity[static_cast<std::size_t>(y) * width + x]; }

  void set_depth(DepthMap d) {
    if (d.width != width || d.height != height)
      throw Error("depth map dimensions differ from the intensity image");
    depth = std::move(d);
  }
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // 0 or 1

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(pixels.begin(), pixels.end(), 1)); }
  bool operator==(const BinaryMask&) const = default;
};

// Netpbm codecs: P5 (8/16-bit gray, big-endian samples) and P4 (1-bit).
namespace pnm {

struct Header {
  char kind = 0;
  int width = 0;
  int height = 0;
  int maxval = 1;
};

namespace detail {

inline std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {}
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

inline int to_int(const std::string& s, const std::filesystem::path& path) {
  try {
    std::size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size() || v < 0) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("bad netpbm header field '" + s + "' in " + path.string());
  }
}

}  // namespace detail

inline Header read_header(std::istream& in, const std::filesystem::path& path) {
  const std::string magic = detail::next_token(in);
  if (magic != "P5" && magic != "P4") throw FormatError("unsupported netpbm magic '" + magic + "' in " + path.string());
  Header h;
  h.kind = magic[1];
  h.width = detail::to_int(detail::next_token(in), path);
  h.height = detail::to_int(detail::next_token(in), path);
  if (h.kind == '5') h.maxval = detail::to_int(detail::next_token(in), path);
  if (h.width == 0 || h.height == 0 || h.maxval == 0 || h.maxval > 65535)
    throw FormatError("bad netpbm dimensions in " + path.string());
  return h;
}

// Returns raw samples (0..maxval) row-major.
inline std::vector<std::uint16_t> read_samples(const std::filesystem::path& path, Header& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  h = read_header(in, path);
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  std::vector<std::uint16_t> out(n);
  if (h.kind == '4') {
    const std::size_t row_bytes = (static_cast<std::size_t>(h.width) + 7) / 8;
    std::vector<unsigned char> row(row_bytes);
    for (int y = 0; y < h.height; ++y) {
      if (!in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row_bytes)))
        throw FormatError("truncated PBM data in " + path.string());
      for (int x = 0; x < h.width; ++x)
        out[static_cast<std::size_t>(y) * h.width + x] = (row[x / 8] >> (7 - x % 8)) & 1u;
    }
    return out;
  }
  const bool wide = h.maxval > 255;
  std::vector<unsigned char> raw(n * (wide ? 2 : 1));
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError("truncated PGM data in " + path.string());
  for (std::size_t i = 0; i < n; ++i)
    out[i] = wide ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  return out;
}

inline void write_gray(const std::filesystem::path& path, int w, int h, int maxval,
                       const std::vector<std::uint16_t>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << '\n' << maxval << '\n';
  for (std::uint16_t s : samples) {
    if (maxval > 255) out.put(static_cast<char>(s >> 8));
    out.put(static_cast<char>(s & 0xff));
  }
}

}  // namespace pnm

// 8-bit grayscale image -> intensity in [0,1].
inline ImageRGBD read_intensity(const std::filesystem::path& path) {
  pnm::Header h;
  auto s = pnm::read_samples(path, h);
  if (h.kind != '5') throw FormatError("intensity image must be a PGM: " + path.string());
  ImageRGBD img(h.width, h.height);
  for (std::size_t i = 0; i < s.size(); ++i) img.intensity[i] = static_cast<float>(s[i]) / static_cast<float>(h.maxval);
  return img;
}

inline void write_intensity(const ImageRGBD& img, const std::filesystem::path& path) {
  std::vector<std::uint16_t> s(img.intensity.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img.intensity[i], 0.0f, 1.0f) * 255.0f));
  pnm::write_gray(path, img.width, img.height, 255, s);
}

// 16-bit depth image, millimeters, 0 = invalid.
inline DepthMap read_depth(const std::filesystem::path& path) {
  pnm::Header h;
  auto s = pnm::read_samples(path, h);
  if (h.kind != '5') throw FormatError("depth map must be a 16-bit PGM: " + path.string());
  DepthMap d(h.width, h.height);
  for (std::size_t i = 0; i < s.size(); ++i) d.meters[i] = s[i] == 0 ? kInvalidDepth : static_cast<float>(s[i]) / 1000.0f;
  return d;
}

inline void write_depth(const DepthMap& d, const std::filesystem::path& path) {
  std::vector<std::uint16_t> s(d.meters.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const float m = d.meters[i];
    s[i] = (std::isfinite(m) && m > 0.0f) ? static_cast<std::uint16_t>(std::clamp<long>(std::lround(m * 1000.0f), 1, 65535)) : 0;
  }
  pnm::write_gray(path, d.width, d.height, 65535, s);
}

// Masks are stored as 1-bit PBM; any non-zero PGM sample also reads as set.
inline BinaryMask read_mask(const std::filesystem::path& path) {
  pnm::Header h;
  auto s = pnm::read_samples(path, h);
  BinaryMask m(h.width, h.height);
  for (std::size_t i = 0; i < s.size(); ++i) m.pixels[i] = s[i] != 0 ? 1 : 0;
  return m;
}

inline void write_mask(const BinaryMask& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P4\n" << m.width << ' ' << m.height << '\n';
  const std::size_t row_bytes = (static_cast<std::size_t>(m.width) + 7) / 8;
  std::vector<unsigned char> row(row_bytes);
  for (int y = 0; y < m.height; ++y) {
    std::fill(row.begin(), row.end(), 0);
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y)) row[x / 8] |= static_cast<unsigned char>(1u << (7 - x % 8));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row_bytes));
  }
}

}  // namespace ism3d
