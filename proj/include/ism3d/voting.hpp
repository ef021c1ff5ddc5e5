#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <tuple>
#include <vector>

#include "ism3d/codebook.hpp"
#include "ism3d/common.hpp"
#include "ism3d/features.hpp"
#include "ism3d/model.hpp"

namespace ism3d {

// Voting spaces. Continuous coordinates:
//   ISM    (x, y, s)          s = s_f / s_i
//   JISM   (x, y, s) + class
//   JI3SM1 (x, y, s, d) + class
//   JI3SM2 (x, y, d) + class
//   JI3SM3 (x, y, d * s) + class
// with x = x_f - x_i s, y = y_f - y_i s.
enum class Variant { ISM, JISM, JI3SM1, JI3SM2, JI3SM3 };

inline constexpr std::size_t dimensions(Variant v) { return v == Variant::JI3SM1 ? 4 : 3; }
inline constexpr bool uses_depth(Variant v) { return v == Variant::JI3SM1 || v == Variant::JI3SM2 || v == Variant::JI3SM3; }
inline constexpr bool uses_class(Variant v) { return v != Variant::ISM; }

inline constexpr std::array<Variant, 5> kAllVariants = {Variant::ISM, Variant::JISM, Variant::JI3SM1, Variant::JI3SM2,
                                                        Variant::JI3SM3};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::ISM: return "ism";
    case Variant::JISM: return "jism";
    case Variant::JI3SM1: return "ji3sm1";
    case Variant::JI3SM2: return "ji3sm2";
    case Variant::JI3SM3: return "ji3sm3";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  return std::nullopt;
}

using Coords = std::array<double, 4>;

struct Vote {
  Coords coords{};
  std::optional<std::size_t> class_id;  // absent for ISM
  double weight = 0.0;
  std::size_t feature = 0;
  std::size_t word_id = 0;
  std::size_t occurrence = 0;

  bool operator==(const Vote&) const = default;
};

// Window half-widths per dimension.
struct Bandwidths {
  double xy = 10.0;
  double s = 0.01;
  double d = 0.15;
  double sd = 0.15;

  Coords for_variant(Variant v) const {
    switch (v) {
      case Variant::ISM:
      case Variant::JISM: return {xy, xy, s, 1.0};
      case Variant::JI3SM1: return {xy, xy, s, d};
      case Variant::JI3SM2: return {xy, xy, d, 1.0};
      case Variant::JI3SM3: return {xy, xy, sd, 1.0};
    }
    return {xy, xy, s, 1.0};
  }
  void validate() const {
    if (!(xy > 0 && s > 0 && d > 0 && sd > 0)) throw ConfigError("bandwidths must be positive");
  }
};

struct Hypothesis {
  Coords coords{};
  std::size_t dims = 3;
  std::optional<std::size_t> class_id;
  double score = 0.0;
  std::vector<std::size_t> support;  // indices into the vote list

  double x() const { return coords[0]; }
  double y() const { return coords[1]; }
};

struct MeanShiftParams {
  double tolerance = 1e-3;     // shift norm in bandwidth units
  int max_iterations = 100;
  double merge_distance = 0.5; // bandwidth units
};

// Projects an occurrence through a feature into voting coordinates.
inline Coords vote_coords(const Feature& f, const Occurrence& o, Variant v) {
  const double r = f.scale / o.scale;
  Coords c{f.x - o.x * r, f.y - o.y * r, 0.0, 0.0};
  const double d = f.depth.value_or(0.0);
  switch (v) {
    case Variant::ISM:
    case Variant::JISM: c[2] = r; break;
    case Variant::JI3SM1:
      c[2] = r;
      c[3] = d;
      break;
    case Variant::JI3SM2: c[2] = d; break;
    case Variant::JI3SM3: c[2] = d * r; break;
  }
  return c;
}

// Every (feature, activated word, occurrence) triple casts one vote of weight
// 1/(#words activated by the feature) * 1/(#occurrences of the word with the
// occurrence's class). Under ISM the normalizer is the word's total
// occurrence count. Depth variants skip features without depth.
inline std::vector<Vote> cast_votes(const FeatureSet& features, const std::vector<std::vector<Activation>>& activations,
                                    const Model& model, Variant variant) {
  if (activations.size() != features.size()) throw Error("cast_votes: one activation list per feature required");
  std::vector<Vote> votes;
  std::vector<std::size_t> per_class(model.n_classes());
  for (std::size_t fi = 0; fi < features.size(); ++fi) {
    const Feature& f = features[fi];
    if (uses_depth(variant) && !f.depth) continue;
    const auto& acts = activations[fi];
    if (acts.empty()) continue;
    const double word_share = 1.0 / static_cast<double>(acts.size());
    for (const auto& a : acts) {
      const auto [lo, hi] = model.range_of(a.word_id);
      if (lo == hi) continue;
      std::fill(per_class.begin(), per_class.end(), 0);
      for (std::size_t i = lo; i < hi; ++i) ++per_class[model.occurrences[i].class_id];
      for (std::size_t i = lo; i < hi; ++i) {
        const Occurrence& o = model.occurrences[i];
        const std::size_t norm = uses_class(variant) ? per_class[o.class_id] : hi - lo;
        Vote v;
        v.coords = vote_coords(f, o, variant);
        if (uses_class(variant)) v.class_id = o.class_id;
        v.weight = word_share / static_cast<double>(norm);
        v.feature = fi;
        v.word_id = a.word_id;
        v.occurrence = i;
        votes.push_back(v);
      }
    }
  }
  return votes;
}

inline std::vector<std::vector<Activation>> match_all(const Codebook& cb, const FeatureSet& features, double t_match) {
  std::vector<std::vector<Activation>> out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back(match(cb, f.descriptor, t_match));
  return out;
}

namespace detail {

inline bool vote_less(const Vote& a, const Vote& b) {
  const std::size_t ca = a.class_id.value_or(0), cb = b.class_id.value_or(0);
  if (ca != cb) return ca < cb;
  if (a.coords != b.coords) return a.coords < b.coords;
  if (a.weight != b.weight) return a.weight < b.weight;
  return std::tie(a.feature, a.word_id, a.occurrence) < std::tie(b.feature, b.word_id, b.occurrence);
}

// Votes of one class partition in bandwidth-normalized coordinates, bucketed
// on a unit grid over (x, y).
class Partition {
 public:
  Partition(std::vector<Coords> pts, std::vector<double> w, std::size_t dims)
      : pts_(std::move(pts)), w_(std::move(w)), dims_(dims) {
    for (std::size_t i = 0; i < pts_.size(); ++i) grid_[key(cell(pts_[i][0]), cell(pts_[i][1]))].push_back(i);
  }

  std::size_t size() const { return pts_.size(); }
  const Coords& point(std::size_t i) const { return pts_[i]; }

  bool in_window(const Coords& p, std::size_t i) const {
    for (std::size_t k = 0; k < dims_; ++k)
      if (std::abs(pts_[i][k] - p[k]) > 1.0) return false;
    return true;
  }

  // Calls fn(i) for every point inside the closed unit box around p, in a
  // fixed order.
  template <typename Fn>
  void for_window(const Coords& p, Fn&& fn) const {
    const std::int64_t cx = cell(p[0]), cy = cell(p[1]);
    for (std::int64_t gy = cy - 1; gy <= cy + 1; ++gy)
      for (std::int64_t gx = cx - 1; gx <= cx + 1; ++gx) {
        auto it = grid_.find(key(gx, gy));
        if (it == grid_.end()) continue;
        for (std::size_t i : it->second)
          if (in_window(p, i)) fn(i);
      }
  }

  // Weighted mean and total weight of the window around p.
  std::pair<Coords, double> window_mean(const Coords& p) const {
    Coords m{};
    double wsum = 0.0;
    for_window(p, [&](std::size_t i) {
      wsum += w_[i];
      for (std::size_t k = 0; k < dims_; ++k) m[k] += w_[i] * pts_[i][k];
    });
    if (wsum > 0)
      for (std::size_t k = 0; k < dims_; ++k) m[k] /= wsum;
    return {m, wsum};
  }

 private:
  static std::int64_t cell(double v) { return static_cast<std::int64_t>(std::floor(v)); }
  static std::uint64_t key(std::int64_t gx, std::int64_t gy) {
    return (static_cast<std::uint64_t>(gx) << 32) ^ (static_cast<std::uint64_t>(gy) & 0xffffffffu);
  }

  std::vector<Coords> pts_;
  std::vector<double> w_;
  std::size_t dims_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid_;
};

inline double norm_dist(const Coords& a, const Coords& b, std::size_t dims) {
  double s = 0.0;
  for (std::size_t k = 0; k < dims; ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

}  // namespace detail

// Flat-kernel mean shift with axis-aligned windows of the given half-widths.
// Class partitions are searched independently. Every distinct vote seeds a
// search; converged modes closer than merge_distance (bandwidth units) to a
// stronger mode are merged away. Result sorted by score desc, then (x, y).
inline std::vector<Hypothesis> mean_shift(std::span<const Vote> votes, const Bandwidths& bandwidths, Variant variant,
                                          const MeanShiftParams& params = {}) {
  bandwidths.validate();
  std::vector<Hypothesis> out;
  if (votes.empty()) return out;
  const std::size_t dims = dimensions(variant);
  const Coords bw = bandwidths.for_variant(variant);

  std::vector<std::size_t> order(votes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (detail::vote_less(votes[a], votes[b])) return true;
    if (detail::vote_less(votes[b], votes[a])) return false;
    return a < b;
  });

  std::size_t begin = 0;
  while (begin < order.size()) {
    const auto cls = votes[order[begin]].class_id;
    std::size_t end = begin;
    while (end < order.size() && votes[order[end]].class_id.value_or(0) == cls.value_or(0)) ++end;

    std::vector<Coords> pts;
    std::vector<double> w;
    for (std::size_t k = begin; k < end; ++k) {
      const Vote& v = votes[order[k]];
      Coords q{};
      for (std::size_t d = 0; d < dims; ++d) q[d] = v.coords[d] / bw[d];
      pts.push_back(q);
      w.push_back(v.weight);
    }
    const detail::Partition part(pts, w, dims);

    struct Mode {
      Coords p;
      double score;
    };
    std::vector<Mode> modes;
    for (std::size_t i = 0; i < part.size(); ++i) {
      if (i > 0 && part.point(i) == part.point(i - 1)) continue;  // same seed, same fixed point
      Coords p = part.point(i);
      for (int it = 0; it < params.max_iterations; ++it) {
        const auto [m, ws] = part.window_mean(p);
        if (ws <= 0.0) break;
        const double shift = detail::norm_dist(m, p, dims);
        p = m;
        if (shift < params.tolerance) break;
      }
      modes.push_back({p, part.window_mean(p).second});
    }
    std::sort(modes.begin(), modes.end(), [](const Mode& a, const Mode& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.p < b.p;
    });
    std::vector<Coords> kept;
    for (const Mode& m : modes) {
      if (m.score <= 0.0) continue;
      bool dup = false;
      for (const Coords& k : kept)
        if (detail::norm_dist(k, m.p, dims) < params.merge_distance) {
          dup = true;
          break;
        }
      if (!dup) kept.push_back(m.p);
    }
    for (const Coords& p : kept) {
      Hypothesis h;
      h.dims = dims;
      h.class_id = cls;
      part.for_window(p, [&](std::size_t i) {
        h.support.push_back(order[begin + i]);
        h.score += w[i];
      });
      std::sort(h.support.begin(), h.support.end());
      for (std::size_t d = 0; d < dims; ++d) h.coords[d] = p[d] * bw[d];
      out.push_back(std::move(h));
    }
    begin = end;
  }
  std::stable_sort(out.begin(), out.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.coords[0] != b.coords[0]) return a.coords[0] < b.coords[0];
    if (a.coords[1] != b.coords[1]) return a.coords[1] < b.coords[1];
    if (a.coords != b.coords) return a.coords < b.coords;
    return a.class_id.value_or(0) < b.class_id.value_or(0);
  });
  return out;
}

// True when the vote lies in the closed bandwidth box around the hypothesis
// and belongs to its class partition.
inline bool supports(const Hypothesis& h, const Vote& v, const Bandwidths& bandwidths, Variant variant) {
  if (v.class_id.value_or(0) != (uses_class(variant) ? h.class_id.value_or(0) : v.class_id.value_or(0))) return false;
  const Coords bw = bandwidths.for_variant(variant);
  for (std::size_t k = 0; k < dimensions(variant); ++k)
    if (std::abs(v.coords[k] / bw[k] - h.coords[k] / bw[k]) > 1.0) return false;
  return true;
}

// Fraction of all cast vote weight inside the strongest hypothesis' window.
// std::nullopt when there are no votes.
inline std::optional<double> voting_confidence(std::span<const Vote> votes, std::span<const Hypothesis> hypotheses,
                                               const Bandwidths& bandwidths, Variant variant) {
  double total = 0.0;
  for (const Vote& v : votes) total += v.weight;
  if (votes.empty() || total <= 0.0) return std::nullopt;
  if (hypotheses.empty()) return 0.0;
  const Hypothesis* best = &hypotheses.front();
  for (const auto& h : hypotheses)
    if (h.score > best->score) best = &h;
  double inside = 0.0;
  for (const Vote& v : votes)
    if (supports(*best, v, bandwidths, variant)) inside += v.weight;
  return std::min(1.0, inside / total);
}

// Weighted majority of the supporting occurrences' classes (ties -> lowest id).
inline std::size_t majority_class(const Hypothesis& h, std::span<const Vote> votes, const Model& model) {
  std::vector<double> w(std::max<std::size_t>(1, model.n_classes()), 0.0);
  for (std::size_t i : h.support) w[model.occurrences[votes[i].occurrence].class_id] += votes[i].weight;
  return static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin());
}

inline void write_votes_csv(std::ostream& out, std::span<const Vote> votes, Variant variant) {
  out << "variant,c0,c1,c2,c3,class,weight,feature,word,occurrence\n";
  const std::size_t dims = dimensions(variant);
  for (const Vote& v : votes) {
    out << to_string(variant);
    for (std::size_t k = 0; k < 4; ++k) {
      out << ',';
      if (k < dims) out << format_double(v.coords[k]);
    }
    out << ',';
    if (v.class_id) out << *v.class_id;
    out << ',' << format_double(v.weight) << ',' << v.feature << ',' << v.word_id << ',' << v.occurrence << '\n';
  }
}

inline void write_hypotheses_csv(std::ostream& out, std::span<const Hypothesis> hyps, Variant variant) {
  out << "variant,c0,c1,c2,c3,class,score,support\n";
  for (const Hypothesis& h : hyps) {
    out << to_string(variant);
    for (std::size_t k = 0; k < 4; ++k) {
      out << ',';
      if (k < h.dims) out << format_double(h.coords[k]);
    }
    out << ',';
    if (h.class_id) out << *h.class_id;
    out << ',' << format_double(h.score) << ',' << h.support.size() << '\n';
  }
}

}  // namespace ism3d
