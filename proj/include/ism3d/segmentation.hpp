#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "ism3d/features.hpp"
#include "ism3d/image.hpp"
#include "ism3d/model.hpp"
#include "ism3d/voting.hpp"

namespace ism3d {

// A supporting vote traced back to its feature, with the occurrence's mask
// patch placed on the feature support: a square of side support_factor * s_f
// centered at (x, y).
struct Contribution {
  std::size_t vote = 0;
  std::size_t feature = 0;
  std::size_t occurrence = 0;
  double weight = 0.0;
  double x = 0.0;
  double y = 0.0;
  double side = 0.0;
  MaskPatch patch;
};

struct ProbabilityMap {
  int width = 0;
  int height = 0;
  std::vector<double> value;   // in [0,1]
  std::vector<double> weight;  // accumulated contribution weight, 0 = untouched

  ProbabilityMap() = default;
  ProbabilityMap(int w, int h)
      : width(w), height(h), value(static_cast<std::size_t>(w) * h, 0.0), weight(static_cast<std::size_t>(w) * h, 0.0) {}
  double at(int x, int y) const { return value[static_cast<std::size_t>(y) * width + x]; }
  double weight_at(int x, int y) const { return weight[static_cast<std::size_t>(y) * width + x]; }
  bool touched(int x, int y) const { return weight_at(x, y) > 0.0; }
};

struct SegmentationResult {
  ProbabilityMap figure;
  ProbabilityMap ground;
  BinaryMask mask;
  std::size_t hypothesis = 0;
};

// Supporting votes of the hypothesis whose occurrence class equals the
// hypothesis class; other-class patches are treated as false positives.
inline std::vector<Contribution> backproject(const Hypothesis& h, std::span<const Vote> votes, const FeatureSet& features,
                                             const Model& model, std::size_t hypothesis_class) {
  std::vector<Contribution> out;
  out.reserve(h.support.size());
  for (std::size_t vi : h.support) {
    const Vote& v = votes[vi];
    const Occurrence& o = model.occurrences[v.occurrence];
    if (o.class_id != hypothesis_class) continue;
    const Feature& f = features[v.feature];
    out.push_back({vi, v.feature, v.occurrence, v.weight, f.x, f.y, model.params.support_factor * f.scale, o.mask});
  }
  return out;
}

inline std::vector<Contribution> backproject(const Hypothesis& h, std::span<const Vote> votes, const FeatureSet& features,
                                             const Model& model) {
  const std::size_t cls = h.class_id ? *h.class_id : majority_class(h, votes, model);
  return backproject(h, votes, features, model, cls);
}

// Pixel range [lo, hi] covered by a patch of the given side centered at c.
inline std::pair<int, int> patch_span(double c, double side) {
  const double half = 0.5 * side;
  return {static_cast<int>(std::ceil(c - half)), static_cast<int>(std::floor(c + half))};
}

// figure(p) = sum w mask(p) / sum w, ground(p) = sum w (1 - mask(p)) / sum w,
// over contributions covering p (nearest-neighbor patch resampling).
// Untouched pixels keep weight 0 and value 0 in both maps.
inline std::pair<ProbabilityMap, ProbabilityMap> probability_maps(std::span<const Contribution> contributions, int width,
                                                                   int height) {
  ProbabilityMap fig(width, height), gnd(width, height);
  std::vector<double> fsum(fig.value.size(), 0.0);
  for (const Contribution& c : contributions) {
    if (c.patch.side <= 0 || c.side <= 0.0 || c.weight <= 0.0) continue;
    const auto [x0, x1] = patch_span(c.x, c.side);
    const auto [y0, y1] = patch_span(c.y, c.side);
    const double left = c.x - 0.5 * c.side, top = c.y - 0.5 * c.side;
    for (int py = std::max(0, y0); py <= std::min(height - 1, y1); ++py) {
      const int v = std::clamp(static_cast<int>(std::floor((py - top) / c.side * c.patch.side)), 0, c.patch.side - 1);
      for (int px = std::max(0, x0); px <= std::min(width - 1, x1); ++px) {
        const int u = std::clamp(static_cast<int>(std::floor((px - left) / c.side * c.patch.side)), 0, c.patch.side - 1);
        const std::size_t i = static_cast<std::size_t>(py) * width + px;
        fig.weight[i] += c.weight;
        fsum[i] += c.weight * c.patch.at(u, v);
      }
    }
  }
  for (std::size_t i = 0; i < fsum.size(); ++i) {
    gnd.weight[i] = fig.weight[i];
    if (fig.weight[i] > 0.0) {
      fig.value[i] = std::clamp(fsum[i] / fig.weight[i], 0.0, 1.0);
      gnd.value[i] = 1.0 - fig.value[i];
    }
  }
  return {std::move(fig), std::move(gnd)};
}

// Figure wherever touched and figure > ground. Ties go to ground, where a tie
// is anything within kTieTolerance: accumulation order must not decide them.
inline constexpr double kTieTolerance = 1e-9;

inline BinaryMask segment(const ProbabilityMap& figure, const ProbabilityMap& ground) {
  if (figure.width != ground.width || figure.height != ground.height) throw Error("segment: map dimensions differ");
  BinaryMask m(figure.width, figure.height);
  for (std::size_t i = 0; i < m.pixels.size(); ++i)
    m.pixels[i] = (figure.weight[i] > 0.0 && figure.value[i] > ground.value[i] + kTieTolerance) ? 1 : 0;
  return m;
}

inline SegmentationResult segment_hypothesis(const Hypothesis& h, std::size_t hypothesis_index, std::span<const Vote> votes,
                                             const FeatureSet& features, const Model& model, int width, int height) {
  const auto contribs = backproject(h, votes, features, model);
  auto [fig, gnd] = probability_maps(contribs, width, height);
  SegmentationResult r;
  r.mask = segment(fig, gnd);
  r.figure = std::move(fig);
  r.ground = std::move(gnd);
  r.hypothesis = hypothesis_index;
  return r;
}

// 8-bit grayscale rendering of a map (value * 255).
inline void write_map(const ProbabilityMap& m, const std::filesystem::path& path) {
  std::vector<std::uint16_t> s(m.value.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<std::uint16_t>(std::lround(std::clamp(m.value[i], 0.0, 1.0) * 255.0));
  pnm::write_gray(path, m.width, m.height, 255, s);
}

}  // namespace ism3d
