#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ism3d/common.hpp"
#include "ism3d/image.hpp"

namespace ism3d {

// An interest point: position and scale in pixels, optional depth in meters,
// unit-norm descriptor.
struct Feature {
  double x = 0.0;
  double y = 0.0;
  double scale = 1.0;
  std::optional<double> depth;
  Descriptor descriptor;

  bool operator==(const Feature&) const = default;
};

using FeatureSet = std::vector<Feature>;

// Multi-scale Harris corners + gradient-orientation histogram descriptor.
// Descriptor dimension is grid * grid * orientation_bins (default 128).
struct ExtractionParams {
  int levels = 4;
  double sigma0 = 1.6;              // differentiation scale of level 0
  double scale_step = std::numbers::sqrt2;
  double integration_factor = 1.5;  // integration sigma = factor * differentiation sigma
  double harris_k = 0.04;
  double threshold = 1e-6;          // on the scale-normalized Harris response
  int border = 2;
  int grid = 4;
  int orientation_bins = 8;
  double support_factor = 16.0;     // descriptor window side per unit scale
  std::size_t max_features = 0;     // 0 = unlimited (strongest kept)

  std::size_t descriptor_dim() const { return static_cast<std::size_t>(grid) * grid * orientation_bins; }
};

namespace detail {

// Row-major single-channel image of doubles.
struct Plane {
  int w = 0, h = 0;
  std::vector<double> v;
  Plane() = default;
  Plane(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}
  double& operator()(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
  double operator()(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
  double clamped(int x, int y) const { return (*this)(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); }
};

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& x : k) x /= sum;
  return k;
}

// Separable Gaussian blur with clamp-to-edge borders.
inline Plane blur(const Plane& src, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  Plane tmp(src.w, src.h), out(src.w, src.h);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * src.clamped(x + i, y);
      tmp(x, y) = acc;
    }
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.clamped(x, y + i);
      out(x, y) = acc;
    }
  return out;
}

inline void gradients(const Plane& L, Plane& gx, Plane& gy) {
  gx = Plane(L.w, L.h);
  gy = Plane(L.w, L.h);
  for (int y = 0; y < L.h; ++y)
    for (int x = 0; x < L.w; ++x) {
      gx(x, y) = 0.5 * (L.clamped(x + 1, y) - L.clamped(x - 1, y));
      gy(x, y) = 0.5 * (L.clamped(x, y + 1) - L.clamped(x, y - 1));
    }
}

// Scale-normalized Harris response at differentiation scale sigma_d.
inline Plane harris_response(const Plane& base, double sigma_d, const ExtractionParams& p, Plane* smoothed = nullptr) {
  Plane L = blur(base, sigma_d);
  Plane gx, gy;
  gradients(L, gx, gy);
  Plane xx(L.w, L.h), yy(L.w, L.h), xy(L.w, L.h);
  for (std::size_t i = 0; i < L.v.size(); ++i) {
    xx.v[i] = gx.v[i] * gx.v[i];
    yy.v[i] = gy.v[i] * gy.v[i];
    xy.v[i] = gx.v[i] * gy.v[i];
  }
  const double sigma_i = p.integration_factor * sigma_d;
  xx = blur(xx, sigma_i);
  yy = blur(yy, sigma_i);
  xy = blur(xy, sigma_i);
  Plane R(L.w, L.h);
  const double norm = std::pow(sigma_d, 4);
  for (std::size_t i = 0; i < R.v.size(); ++i) {
    const double det = xx.v[i] * yy.v[i] - xy.v[i] * xy.v[i];
    const double tr = xx.v[i] + yy.v[i];
    R.v[i] = norm * (det - p.harris_k * tr * tr);
  }
  if (smoothed) *smoothed = std::move(L);
  return R;
}

// Strict local maximum with raster-order tie breaking: ties against earlier
// neighbors lose, ties against later neighbors win.
inline bool is_peak(const Plane& R, int x, int y) {
  const double c = R(x, y);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      if (!dx && !dy) continue;
      const double n = R(x + dx, y + dy);
      const bool earlier = dy < 0 || (dy == 0 && dx < 0);
      if (earlier ? n >= c : n > c) return false;
    }
  return true;
}

inline Descriptor orientation_histogram(const Plane& gx, const Plane& gy, double cx, double cy, double sigma,
                                        const ExtractionParams& p) {
  const int g = p.grid, nb = p.orientation_bins;
  Descriptor d(p.descriptor_dim(), 0.0);
  const double half = 0.5 * p.support_factor * sigma;
  const double cell = 2.0 * half / g;
  const double wsig = half;
  const int x0 = static_cast<int>(std::ceil(cx - half)), x1 = static_cast<int>(std::floor(cx + half));
  const int y0 = static_cast<int>(std::ceil(cy - half)), y1 = static_cast<int>(std::floor(cy + half));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      const int cxi = std::clamp(static_cast<int>(std::floor((dx + half) / cell)), 0, g - 1);
      const int cyi = std::clamp(static_cast<int>(std::floor((dy + half) / cell)), 0, g - 1);
      const double ix = gx.clamped(x, y), iy = gy.clamped(x, y);
      const double mag = std::hypot(ix, iy);
      if (mag == 0.0) continue;
      const double w = mag * std::exp(-(dx * dx + dy * dy) / (2.0 * wsig * wsig));
      double ang = std::atan2(iy, ix);
      if (ang < 0) ang += 2.0 * std::numbers::pi;
      const double pos = ang / (2.0 * std::numbers::pi) * nb;
      const int b0 = static_cast<int>(std::floor(pos)) % nb;
      const int b1 = (b0 + 1) % nb;
      const double frac = pos - std::floor(pos);
      const std::size_t base = (static_cast<std::size_t>(cyi) * g + cxi) * nb;
      d[base + b0] += w * (1.0 - frac);
      d[base + b1] += w * frac;
    }
  if (normalize(d) == 0.0) return {};
  for (double& v : d) v = std::min(v, 0.2);
  normalize(d);
  return d;
}

inline bool feature_order(const Feature& a, const Feature& b) {
  return std::tie(a.y, a.x, a.scale) < std::tie(b.y, b.x, b.scale);
}

}  // namespace detail

// Deterministic; output sorted by (y, x, scale). Constant images give no features.
inline FeatureSet extract_features(const ImageRGBD& image, const ExtractionParams& params = {}) {
  if (image.empty()) throw Error("extract_features: empty image");
  detail::Plane base(image.width, image.height);
  for (std::size_t i = 0; i < base.v.size(); ++i) base.v[i] = image.intensity[i];

  struct Candidate {
    Feature f;
    double response;
  };
  std::vector<Candidate> found;
  const int b = std::max(1, params.border);
  for (int level = 0; level < params.levels; ++level) {
    const double sigma = params.sigma0 * std::pow(params.scale_step, level);
    detail::Plane L;
    const detail::Plane R = detail::harris_response(base, sigma, params, &L);
    detail::Plane gx, gy;
    detail::gradients(L, gx, gy);
    for (int y = b; y < image.height - b; ++y)
      for (int x = b; x < image.width - b; ++x) {
        if (R(x, y) <= params.threshold || !detail::is_peak(R, x, y)) continue;
        Descriptor d = detail::orientation_histogram(gx, gy, x, y, sigma, params);
        if (d.empty()) continue;
        found.push_back({Feature{static_cast<double>(x), static_cast<double>(y), sigma, std::nullopt, std::move(d)}, R(x, y)});
      }
  }
  if (params.max_features && found.size() > params.max_features) {
    std::stable_sort(found.begin(), found.end(), [](const Candidate& a, const Candidate& c) {
      if (a.response != c.response) return a.response > c.response;
      return detail::feature_order(a.f, c.f);
    });
    found.resize(params.max_features);
  }
  FeatureSet out;
  out.reserve(found.size());
  for (auto& c : found) out.push_back(std::move(c.f));
  std::sort(out.begin(), out.end(), detail::feature_order);
  return out;
}

// Median of the valid depths in a window x window neighborhood around the
// rounded feature position. Even counts average the two middle values.
inline std::optional<double> sample_depth(const DepthMap& depth, double x, double y, int window = 3) {
  const int cx = static_cast<int>(std::lround(x)), cy = static_cast<int>(std::lround(y));
  const int r = window / 2;
  std::vector<double> vals;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const int px = cx + dx, py = cy + dy;
      if (px < 0 || py < 0 || px >= depth.width || py >= depth.height || !depth.valid(px, py)) continue;
      vals.push_back(depth.at(px, py));
    }
  if (vals.empty()) return std::nullopt;
  std::sort(vals.begin(), vals.end());
  const std::size_t n = vals.size();
  return n % 2 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
}

inline FeatureSet attach_depth(FeatureSet features, const DepthMap& depth, int window = 3) {
  for (Feature& f : features) f.depth = sample_depth(depth, f.x, f.y, window);
  return features;
}

// Text format:
//   ismfeat v1 dim=<D>
//   x y scale depth d0 ... d{D-1}      (depth -1 = absent)
inline void write_features(const FeatureSet& features, std::ostream& out, std::size_t dim = 0) {
  if (dim == 0) dim = features.empty() ? 128 : features.front().descriptor.size();
  out << "ismfeat v1 dim=" << dim << '\n';
  for (const Feature& f : features) {
    if (f.descriptor.size() != dim) throw Error("write_features: descriptor dimension mismatch");
    out << format_double(f.x) << ' ' << format_double(f.y) << ' ' << format_double(f.scale) << ' '
        << (f.depth ? format_double(*f.depth) : std::string("-1"));
    for (double v : f.descriptor) out << ' ' << format_double(v);
    out << '\n';
  }
}

inline void write_features(const FeatureSet& features, const std::filesystem::path& path, std::size_t dim = 0) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  write_features(features, out, dim);
}

inline FeatureSet read_features(std::istream& in, std::size_t* dim_out = nullptr) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing ismfeat header", 1);
  std::istringstream hs(line);
  std::string magic, version, dimtok;
  hs >> magic >> version >> dimtok;
  if (magic != "ismfeat" || version != "v1" || dimtok.rfind("dim=", 0) != 0) throw FormatError("bad ismfeat header", 1);
  double dimv = 0;
  if (!parse_double(std::string_view(dimtok).substr(4), dimv) || dimv < 1 || dimv != std::floor(dimv))
    throw FormatError("bad descriptor dimension", 1);
  const auto dim = static_cast<std::size_t>(dimv);
  if (dim_out) *dim_out = dim;

  FeatureSet out;
  std::size_t lineno = 1;
  std::vector<double> vals;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    vals.clear();
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) {
      double v;
      if (!parse_double(tok, v)) throw FormatError("not a number: '" + tok + "'", lineno);
      vals.push_back(v);
    }
    if (vals.size() != dim + 4)
      throw FormatError("expected " + std::to_string(dim + 4) + " fields, got " + std::to_string(vals.size()), lineno);
    Feature f;
    f.x = vals[0];
    f.y = vals[1];
    f.scale = vals[2];
    if (!(f.scale > 0)) throw FormatError("scale must be positive", lineno);
    if (vals[3] != -1.0) {
      if (!(vals[3] > 0)) throw FormatError("depth must be positive or -1", lineno);
      f.depth = vals[3];
    }
    f.descriptor.assign(vals.begin() + 4, vals.end());
    out.push_back(std::move(f));
  }
  return out;
}

inline FeatureSet read_features(const std::filesystem::path& path, std::size_t* dim_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return read_features(in, dim_out);
}

}  // namespace ism3d
