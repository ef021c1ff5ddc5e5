#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ism3d/common.hpp"
#include "ism3d/evaluation.hpp"
#include "ism3d/features.hpp"
#include "ism3d/image.hpp"
#include "ism3d/model.hpp"

namespace ism3d::synth {

// Seed derivation for independent streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline double gaussian(Rng& rng, double sigma) { return sigma > 0 ? std::normal_distribution<double>(0.0, sigma)(rng) : 0.0; }

inline Descriptor random_unit(Rng& rng, std::size_t dim) {
  Descriptor d(dim);
  std::normal_distribution<double> n01;
  do {
    for (double& v : d) v = n01(rng);
  } while (normalize(d) == 0.0);
  return d;
}

// prototype + isotropic noise of expected norm `noise`, renormalized.
inline Descriptor noisy(const Descriptor& proto, double noise, Rng& rng) {
  Descriptor d = proto;
  if (noise > 0) {
    const double s = noise / std::sqrt(static_cast<double>(proto.size()));
    std::normal_distribution<double> n01;
    for (double& v : d) v += s * n01(rng);
  }
  normalize(d);
  return d;
}

struct Part {
  std::size_t prototype = 0;
  double x = 0.0;  // offset from the object center at scale 1
  double y = 0.0;
  double scale = 1.0;
  MaskPatch mask;  // template-mask patch over the part support
};

struct ObjectTemplate {
  std::size_t class_id = 0;
  std::vector<Part> parts;
  double half_width = 32.0;  // canonical half extents at scale 1
  double half_height = 20.0;
};

struct WorldParams {
  std::size_t n_classes = 4;
  std::size_t parts_per_class = 16;
  double shared_fraction = 0.3;
  std::size_t dim = 64;
  std::size_t background_pool = 60;
  double half_width = 32.0;
  double half_height = 20.0;
  double part_scale_min = 1.0;
  double part_scale_max = 2.0;
  double support_factor = 16.0;
  std::uint64_t seed = 1;
};

struct World {
  WorldParams params;
  std::vector<std::string> class_names;
  std::vector<Descriptor> prototypes;
  std::vector<ObjectTemplate> templates;  // one per class
  std::vector<std::size_t> background;    // prototype ids of recurring background textures
};

// Elliptic object mask of the template at a placement.
inline bool in_object(const ObjectTemplate& t, double scale, double dx, double dy) {
  const double a = t.half_width * scale, b = t.half_height * scale;
  return (dx * dx) / (a * a) + (dy * dy) / (b * b) <= 1.0;
}

inline void finalize_template(ObjectTemplate& t, double support_factor) {
  // Rasterize the canonical mask once to cut part patches.
  const int w = static_cast<int>(std::ceil(2 * t.half_width)) + 1, h = static_cast<int>(std::ceil(2 * t.half_height)) + 1;
  BinaryMask m(w, h);
  const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(x, y) = in_object(t, 1.0, x - cx, y - cy) ? 1 : 0;
  for (Part& p : t.parts) p.mask = crop_patch(m, cx + p.x, cy + p.y, p.scale, support_factor);
}

// n class templates with parts_per_class parts each; round(rho * parts) of
// every class's prototypes come from one pool shared by all classes.
inline World make_templates(const WorldParams& wp) {
  if (wp.shared_fraction < 0.0 || wp.shared_fraction > 1.0) throw Error("make_templates: shared fraction must lie in [0,1]");
  if (wp.parts_per_class < 4) throw Error("make_templates: templates need at least 4 parts");
  World w;
  w.params = wp;
  Rng rng(mix_seed(wp.seed, 0));
  const auto n_shared = static_cast<std::size_t>(std::lround(wp.shared_fraction * static_cast<double>(wp.parts_per_class)));
  std::vector<std::size_t> shared;
  for (std::size_t i = 0; i < n_shared; ++i) {
    shared.push_back(w.prototypes.size());
    w.prototypes.push_back(random_unit(rng, wp.dim));
  }
  for (std::size_t c = 0; c < wp.n_classes; ++c) {
    w.class_names.push_back("class" + std::to_string(c));
    ObjectTemplate t;
    t.class_id = c;
    t.half_width = wp.half_width;
    t.half_height = wp.half_height;
    for (std::size_t k = 0; k < wp.parts_per_class; ++k) {
      Part p;
      if (k < n_shared) {
        p.prototype = shared[k];
      } else {
        p.prototype = w.prototypes.size();
        w.prototypes.push_back(random_unit(rng, wp.dim));
      }
      // Uniform inside 85% of the ellipse.
      double x, y;
      do {
        x = uniform(rng, -1.0, 1.0);
        y = uniform(rng, -1.0, 1.0);
      } while (x * x + y * y > 1.0);
      p.x = 0.85 * x * wp.half_width;
      p.y = 0.85 * y * wp.half_height;
      p.scale = uniform(rng, wp.part_scale_min, wp.part_scale_max);
      t.parts.push_back(p);
    }
    finalize_template(t, wp.support_factor);
    w.templates.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < wp.background_pool; ++i) {
    w.background.push_back(w.prototypes.size());
    w.prototypes.push_back(random_unit(rng, wp.dim));
  }
  return w;
}

struct RigParams {
  std::size_t rows = 5;          // mirrored part rows (wheel-like, same prototype left and right)
  std::size_t body_parts = 2;    // unique parts near the middle
  double column_offset = 24.0;   // columns at x = -a and x = +a
  double half_width = 36.0;
  double half_height = 16.0;
  std::size_t dim = 64;
  std::size_t background_pool = 60;
  double support_factor = 16.0;
  std::uint64_t seed = 7;
};

// Single-class "car" world whose template is built from two mirrored columns
// of identical-looking parts plus a few unique body parts, so two cars side
// by side can alias a phantom center between them.
inline World make_rig_world(const RigParams& rp) {
  World w;
  w.params.n_classes = 1;
  w.params.parts_per_class = 2 * rp.rows + rp.body_parts;
  w.params.shared_fraction = 0.0;
  w.params.dim = rp.dim;
  w.params.background_pool = rp.background_pool;
  w.params.half_width = rp.half_width;
  w.params.half_height = rp.half_height;
  w.params.support_factor = rp.support_factor;
  w.params.seed = rp.seed;
  w.class_names = {"car"};
  Rng rng(mix_seed(rp.seed, 0));
  ObjectTemplate t;
  t.class_id = 0;
  t.half_width = rp.half_width;
  t.half_height = rp.half_height;
  const double span = 0.75 * rp.half_height;
  for (std::size_t r = 0; r < rp.rows; ++r) {
    const std::size_t proto = w.prototypes.size();
    w.prototypes.push_back(random_unit(rng, rp.dim));
    const double y = rp.rows == 1 ? 0.0 : -span + 2.0 * span * static_cast<double>(r) / static_cast<double>(rp.rows - 1);
    const double s = uniform(rng, 1.0, 1.5);
    t.parts.push_back({proto, -rp.column_offset, y, s, {}});
    t.parts.push_back({proto, +rp.column_offset, y, s, {}});
  }
  for (std::size_t b = 0; b < rp.body_parts; ++b) {
    const std::size_t proto = w.prototypes.size();
    w.prototypes.push_back(random_unit(rng, rp.dim));
    const double x = (b % 2 ? 1.0 : -1.0) * 0.35 * rp.column_offset;
    const double y = (b / 2 % 2 ? 1.0 : -1.0) * 0.4 * rp.half_height;
    t.parts.push_back({proto, x, y, uniform(rng, 1.0, 1.5), {}});
  }
  finalize_template(t, rp.support_factor);
  w.templates.push_back(std::move(t));
  for (std::size_t i = 0; i < rp.background_pool; ++i) {
    w.background.push_back(w.prototypes.size());
    w.prototypes.push_back(random_unit(rng, rp.dim));
  }
  return w;
}

struct Placement {
  std::size_t template_index = 0;
  double cx = 0.0;
  double cy = 0.0;
  double scale = 1.0;
  double depth = 1.5;  // meters
};

struct SceneSpec {
  int width = 320;
  int height = 240;
  std::vector<Placement> placements;
  std::size_t clutter = 0;         // background-texture features
  std::size_t random_clutter = 0;  // features with random descriptors
  std::size_t decoys = 0;          // partial part constellations, every feature at its own random depth
  std::size_t decoy_parts = 5;
  double descriptor_noise = 0.3;
  double position_jitter = 1.0;  // px
  double scale_jitter = 0.01;    // sigma of log scale
  double depth_jitter = 0.02;    // m
  double part_dropout = 0.0;
  double missing_depth = 0.0;    // probability that a clutter feature has no depth
  double clutter_depth_min = 0.6;
  double clutter_depth_max = 4.0;
  double clutter_scale_min = 1.0;
  double clutter_scale_max = 2.5;
  bool clutter_outside_objects = false;
  bool raster = false;
  std::uint64_t seed = 0;
};

struct Scene {
  int width = 0;
  int height = 0;
  FeatureSet features;
  std::vector<int> owner;  // per feature: placement index, -1 clutter, -2 decoy
  std::vector<GroundTruthBox> truth;
  std::vector<BinaryMask> masks;  // per placement
  std::optional<ImageRGBD> raster;
};

inline GroundTruthBox placement_box(const World& w, const Placement& p) {
  const auto& t = w.templates.at(p.template_index);
  return {t.class_id, p.cx - t.half_width * p.scale, p.cy - t.half_height * p.scale, p.cx + t.half_width * p.scale,
          p.cy + t.half_height * p.scale, p.depth};
}

namespace detail {

// 2x2 checker of side 8*scale whose quadrant intensities come from the
// prototype's leading signs.
inline void paint_part(ImageRGBD& img, const Descriptor& proto, double x, double y, double scale) {
  const int half = std::max(2, static_cast<int>(std::lround(4.0 * scale)));
  const int cx = static_cast<int>(std::lround(x)), cy = static_cast<int>(std::lround(y));
  float q[4];
  for (int i = 0; i < 4; ++i) q[i] = proto[i % proto.size()] > 0 ? 0.85f : 0.15f;
  if (q[0] == q[1] && q[1] == q[2] && q[2] == q[3]) q[3] = 1.0f - q[3];
  for (int dy = -half; dy < half; ++dy)
    for (int dx = -half; dx < half; ++dx) {
      const int px = cx + dx, py = cy + dy;
      if (px < 0 || py < 0 || px >= img.width || py >= img.height) continue;
      img.at(px, py) = q[(dy >= 0 ? 2 : 0) + (dx >= 0 ? 1 : 0)];
    }
}

}  // namespace detail

inline Scene render_scene(const World& w, const SceneSpec& spec) {
  if (spec.width <= 0 || spec.height <= 0) throw Error("render_scene: bad image size");
  Scene sc;
  sc.width = spec.width;
  sc.height = spec.height;
  for (std::size_t i = 0; i < spec.placements.size(); ++i) {
    const auto& p = spec.placements[i];
    if (p.template_index >= w.templates.size()) throw Error("render_scene: placement " + std::to_string(i) + " has unknown template");
    if (!(p.depth > 0) || !(p.scale > 0)) throw Error("render_scene: placement " + std::to_string(i) + " needs positive depth and scale");
    const auto box = placement_box(w, p);
    if (box.x0 < 0 || box.y0 < 0 || box.x1 > spec.width - 1 || box.y1 > spec.height - 1)
      throw Error("render_scene: placement " + std::to_string(i) + " lies outside the image");
    sc.truth.push_back(box);
  }
  const std::size_t dim = w.params.dim;
  Rng rng(mix_seed(spec.seed, 1));

  auto add = [&](double x, double y, double s, std::optional<double> d, Descriptor desc, int owner) {
    if (x < 0 || y < 0 || x > spec.width - 1 || y > spec.height - 1) return;
    sc.features.push_back({x, y, s, d, std::move(desc)});
    sc.owner.push_back(owner);
  };

  for (std::size_t i = 0; i < spec.placements.size(); ++i) {
    const auto& p = spec.placements[i];
    const auto& t = w.templates[p.template_index];
    BinaryMask m(spec.width, spec.height);
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) m.at(x, y) = in_object(t, p.scale, x - p.cx, y - p.cy) ? 1 : 0;
    sc.masks.push_back(std::move(m));
    for (const Part& part : t.parts) {
      const double drop = uniform(rng, 0.0, 1.0);
      const double jx = gaussian(rng, spec.position_jitter), jy = gaussian(rng, spec.position_jitter);
      const double js = gaussian(rng, spec.scale_jitter), jd = gaussian(rng, spec.depth_jitter);
      Descriptor desc = noisy(w.prototypes[part.prototype], spec.descriptor_noise, rng);
      if (drop < spec.part_dropout) continue;
      const double depth = std::max(0.05, p.depth + jd);
      add(p.cx + part.x * p.scale + jx, p.cy + part.y * p.scale + jy, part.scale * p.scale * std::exp(js), depth,
          std::move(desc), static_cast<int>(i));
    }
  }

  auto inside_any = [&](double x, double y) {
    for (const auto& m : sc.masks)
      if (inside_mask(m, x, y)) return true;
    return false;
  };
  auto clutter_depth = [&]() -> std::optional<double> {
    const double u = uniform(rng, 0.0, 1.0);
    const double d = uniform(rng, spec.clutter_depth_min, spec.clutter_depth_max);
    if (u < spec.missing_depth) return std::nullopt;
    return d;
  };
  auto clutter_pos = [&](double& x, double& y) {
    for (int tries = 0; tries < 1000; ++tries) {
      x = uniform(rng, 0.0, spec.width - 1.0);
      y = uniform(rng, 0.0, spec.height - 1.0);
      if (!spec.clutter_outside_objects || !inside_any(x, y)) return true;
    }
    return false;
  };
  const double lsmin = std::log(spec.clutter_scale_min), lsmax = std::log(spec.clutter_scale_max);
  for (std::size_t k = 0; k < spec.clutter; ++k) {
    double x, y;
    const bool ok = clutter_pos(x, y);
    const double s = std::exp(uniform(rng, lsmin, lsmax));
    const auto d = clutter_depth();
    const std::size_t proto = w.background.empty() ? 0 : w.background[static_cast<std::size_t>(uniform(rng, 0.0, 1.0) * w.background.size()) % w.background.size()];
    Descriptor desc = w.background.empty() ? random_unit(rng, dim) : noisy(w.prototypes[proto], spec.descriptor_noise, rng);
    if (ok) add(x, y, s, d, std::move(desc), -1);
  }
  for (std::size_t k = 0; k < spec.random_clutter; ++k) {
    double x, y;
    const bool ok = clutter_pos(x, y);
    const double s = std::exp(uniform(rng, lsmin, lsmax));
    const auto d = clutter_depth();
    Descriptor desc = random_unit(rng, dim);
    if (ok) add(x, y, s, d, std::move(desc), -1);
  }
  // Decoys: a subset of some template's parts in correct relative geometry,
  // but every feature at an independent random depth.
  for (std::size_t k = 0; k < spec.decoys && !w.templates.empty(); ++k) {
    const auto& t = w.templates[static_cast<std::size_t>(uniform(rng, 0.0, 1.0) * w.templates.size()) % w.templates.size()];
    const double scale = uniform(rng, 0.8, 1.25);
    const double cx = uniform(rng, t.half_width * scale, spec.width - 1 - t.half_width * scale);
    const double cy = uniform(rng, t.half_height * scale, spec.height - 1 - t.half_height * scale);
    std::vector<std::size_t> idx(t.parts.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(spec.decoy_parts, idx.size()));
    for (std::size_t pi : idx) {
      const Part& part = t.parts[pi];
      const double jx = gaussian(rng, spec.position_jitter), jy = gaussian(rng, spec.position_jitter);
      const double js = gaussian(rng, spec.scale_jitter);
      const auto d = clutter_depth();
      Descriptor desc = noisy(w.prototypes[part.prototype], spec.descriptor_noise, rng);
      add(cx + part.x * scale + jx, cy + part.y * scale + jy, part.scale * scale * std::exp(js), d, std::move(desc), -2);
    }
  }

  // Canonical order (y, x, s), owners permuted alongside.
  std::vector<std::size_t> order(sc.features.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return ism3d::detail::feature_order(sc.features[a], sc.features[b]);
  });
  FeatureSet fs;
  std::vector<int> own;
  for (std::size_t i : order) {
    fs.push_back(std::move(sc.features[i]));
    own.push_back(sc.owner[i]);
  }
  sc.features = std::move(fs);
  sc.owner = std::move(own);

  if (spec.raster) {
    ImageRGBD img(spec.width, spec.height, 0.5f);
    DepthMap dm(spec.width, spec.height, 4.0f);
    for (std::size_t i = 0; i < spec.placements.size(); ++i)
      for (std::size_t px = 0; px < dm.meters.size(); ++px)
        if (sc.masks[i].pixels[px]) dm.meters[px] = static_cast<float>(spec.placements[i].depth);
    for (std::size_t i = 0; i < sc.features.size(); ++i) {
      const auto& f = sc.features[i];
      // Raster parts use the prototype nearest to the noisy descriptor.
      std::size_t best = 0;
      double bs = -2.0;
      for (std::size_t p = 0; p < w.prototypes.size(); ++p) {
        const double s = dot(w.prototypes[p], f.descriptor);
        if (s > bs) {
          bs = s;
          best = p;
        }
      }
      detail::paint_part(img, w.prototypes.empty() ? f.descriptor : w.prototypes[best], f.x, f.y, f.scale);
    }
    img.set_depth(std::move(dm));
    sc.raster = std::move(img);
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Alias geometry. Two copies of a template at C1 and C2 = C1 + delta make a
// part p of the first copy and a same-prototype part q of the second vote for
// the same point when delta = 2 (o_p - o_q); the phantom then sits at
// C1 + o_p - o_q.
// ---------------------------------------------------------------------------
struct AliasSolution {
  double dx = 0.0;
  double dy = 0.0;
  double phantom_dx = 0.0;  // phantom center relative to the first copy
  double phantom_dy = 0.0;
  std::size_t pairs = 0;    // aliased (p, q) part pairs
};

inline AliasSolution solve_alias(const ObjectTemplate& t) {
  std::map<std::pair<long, long>, std::size_t> votes;
  for (std::size_t p = 0; p < t.parts.size(); ++p)
    for (std::size_t q = 0; q < t.parts.size(); ++q) {
      if (p == q || t.parts[p].prototype != t.parts[q].prototype) continue;
      if (t.parts[p].scale != t.parts[q].scale) continue;
      const double dx = 2.0 * (t.parts[p].x - t.parts[q].x), dy = 2.0 * (t.parts[p].y - t.parts[q].y);
      if (dx <= 0.0) continue;  // second copy to the right
      ++votes[{std::lround(dx * 1000.0), std::lround(dy * 1000.0)}];
    }
  AliasSolution best;
  for (const auto& [k, n] : votes)
    if (n > best.pairs) {
      best.pairs = n;
      best.dx = static_cast<double>(k.first) / 1000.0;
      best.dy = static_cast<double>(k.second) / 1000.0;
    }
  best.phantom_dx = 0.5 * best.dx;
  best.phantom_dy = 0.5 * best.dy;
  return best;
}

// ---------------------------------------------------------------------------
// Scene presets used by the experiments and the CLI.
// ---------------------------------------------------------------------------

// Training view: one object at canonical scale, background textures around it.
inline SceneSpec training_spec(const World& w, std::size_t template_index, std::uint64_t seed) {
  SceneSpec s;
  const auto& t = w.templates.at(template_index);
  s.width = static_cast<int>(std::ceil(4 * t.half_width));
  s.height = static_cast<int>(std::ceil(4 * t.half_height));
  s.placements = {{template_index, 0.5 * (s.width - 1), 0.5 * (s.height - 1), 1.0, 1.5}};
  s.clutter = 20;
  s.random_clutter = 2;
  s.clutter_outside_objects = true;
  s.seed = seed;
  return s;
}

inline std::vector<FeatureSample> make_training_set(const World& w, std::size_t per_class, std::uint64_t seed) {
  std::vector<FeatureSample> out;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t t = 0; t < w.templates.size(); ++t) {
      const auto spec = training_spec(w, t, mix_seed(seed, i * w.templates.size() + t));
      Scene sc = render_scene(w, spec);
      out.push_back({std::move(sc.features), w.templates[t].class_id, std::move(sc.masks.front())});
    }
  return out;
}

// Non-overlapping random placements; depth = 1.5 m * physical size / apparent scale.
inline std::vector<Placement> random_placements(const World& w, std::size_t count, int width, int height, Rng& rng,
                                                std::optional<std::size_t> template_index = std::nullopt) {
  std::vector<Placement> out;
  for (int tries = 0; out.size() < count && tries < 10000; ++tries) {
    Placement p;
    p.template_index = template_index ? *template_index
                                      : static_cast<std::size_t>(uniform(rng, 0.0, 1.0) * w.templates.size()) % w.templates.size();
    p.scale = uniform(rng, 0.8, 1.25);
    const double phys = uniform(rng, 0.8, 1.25);
    p.depth = 1.5 * phys / p.scale;
    const auto& t = w.templates[p.template_index];
    const double hw = t.half_width * p.scale, hh = t.half_height * p.scale;
    if (2 * hw >= width - 2 || 2 * hh >= height - 2) continue;
    p.cx = uniform(rng, hw + 1, width - 2 - hw);
    p.cy = uniform(rng, hh + 1, height - 2 - hh);
    bool overlap = false;
    const auto nb = placement_box(w, p);
    for (const auto& q : out) {
      const auto b = placement_box(w, q);
      if (nb.x0 < b.x1 + 4 && b.x0 < nb.x1 + 4 && nb.y0 < b.y1 + 4 && b.y0 < nb.y1 + 4) overlap = true;
    }
    if (!overlap) out.push_back(p);
  }
  return out;
}

// One object of a random class in a cluttered scene.
inline SceneSpec classification_spec(const World& w, std::uint64_t seed, std::optional<std::size_t> template_index = {}) {
  SceneSpec s;
  s.seed = seed;
  Rng rng(mix_seed(seed, 2));
  s.placements = random_placements(w, 1, s.width, s.height, rng, template_index);
  s.clutter = 30;
  s.random_clutter = 10;
  s.part_dropout = 0.1;
  return s;
}

// `objects` cars among background clutter and depth-inconsistent decoys.
inline SceneSpec cluttered_spec(const World& w, std::uint64_t seed, std::size_t objects, std::size_t decoys) {
  SceneSpec s;
  s.seed = seed;
  Rng rng(mix_seed(seed, 3));
  s.placements = random_placements(w, objects, s.width, s.height, rng, 0);
  s.clutter = 40;
  s.random_clutter = 10;
  s.decoys = decoys;
  s.decoy_parts = 5;
  return s;
}

// Two same-template objects placed on the alias displacement at the same
// apparent scale, depths 1.0 m and 2.5 m.
inline SceneSpec rig_spec(const World& w, std::uint64_t seed, double near_depth = 1.0, double far_depth = 2.5) {
  const auto& t = w.templates.at(0);
  const AliasSolution a = solve_alias(t);
  if (a.pairs == 0) throw Error("rig_spec: template has no aliasing part pairs");
  SceneSpec s;
  s.seed = seed;
  Rng rng(mix_seed(seed, 4));
  const double lo = t.half_width + 2, hi = s.width - 3 - t.half_width - a.dx;
  const double cx = uniform(rng, lo, std::max(lo, hi));
  const double cy = uniform(rng, t.half_height + 2 + std::max(0.0, -a.dy), s.height - 3 - t.half_height - std::max(0.0, a.dy));
  s.placements = {{0, cx, cy, 1.0, near_depth}, {0, cx + a.dx, cy + a.dy, 1.0, far_depth}};
  return s;
}

// --- SceneSpec / WorldParams as JSON ---------------------------------------

inline nlohmann::json to_json(const WorldParams& p) {
  return {{"n_classes", p.n_classes},       {"parts_per_class", p.parts_per_class},
          {"shared_fraction", p.shared_fraction}, {"dim", p.dim},
          {"background_pool", p.background_pool}, {"half_width", p.half_width},
          {"half_height", p.half_height},   {"part_scale_min", p.part_scale_min},
          {"part_scale_max", p.part_scale_max}, {"support_factor", p.support_factor},
          {"seed", p.seed}};
}

namespace detail {
template <typename T>
void read_key(const nlohmann::json& j, const char* k, T& v) {
  if (j.contains(k)) v = j.at(k).get<T>();
}
inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw ConfigError(std::string("unknown key '") + it.key() + "' in " + what);
  }
}
}  // namespace detail

inline WorldParams world_params_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"n_classes", "parts_per_class", "shared_fraction", "dim", "background_pool", "half_width",
                             "half_height", "part_scale_min", "part_scale_max", "support_factor", "seed"},
                         "world");
  WorldParams p;
  detail::read_key(j, "n_classes", p.n_classes);
  detail::read_key(j, "parts_per_class", p.parts_per_class);
  detail::read_key(j, "shared_fraction", p.shared_fraction);
  detail::read_key(j, "dim", p.dim);
  detail::read_key(j, "background_pool", p.background_pool);
  detail::read_key(j, "half_width", p.half_width);
  detail::read_key(j, "half_height", p.half_height);
  detail::read_key(j, "part_scale_min", p.part_scale_min);
  detail::read_key(j, "part_scale_max", p.part_scale_max);
  detail::read_key(j, "support_factor", p.support_factor);
  detail::read_key(j, "seed", p.seed);
  return p;
}

inline nlohmann::json to_json(const SceneSpec& s) {
  nlohmann::json pl = nlohmann::json::array();
  for (const auto& p : s.placements)
    pl.push_back({{"template", p.template_index}, {"cx", p.cx}, {"cy", p.cy}, {"scale", p.scale}, {"depth", p.depth}});
  return {{"width", s.width},
          {"height", s.height},
          {"placements", pl},
          {"clutter", s.clutter},
          {"random_clutter", s.random_clutter},
          {"decoys", s.decoys},
          {"decoy_parts", s.decoy_parts},
          {"descriptor_noise", s.descriptor_noise},
          {"position_jitter", s.position_jitter},
          {"scale_jitter", s.scale_jitter},
          {"depth_jitter", s.depth_jitter},
          {"part_dropout", s.part_dropout},
          {"missing_depth", s.missing_depth},
          {"clutter_depth_min", s.clutter_depth_min},
          {"clutter_depth_max", s.clutter_depth_max},
          {"clutter_scale_min", s.clutter_scale_min},
          {"clutter_scale_max", s.clutter_scale_max},
          {"clutter_outside_objects", s.clutter_outside_objects},
          {"raster", s.raster},
          {"seed", s.seed}};
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"width", "height", "placements", "clutter", "random_clutter", "decoys", "decoy_parts",
                             "descriptor_noise", "position_jitter", "scale_jitter", "depth_jitter", "part_dropout",
                             "missing_depth", "clutter_depth_min", "clutter_depth_max", "clutter_scale_min",
                             "clutter_scale_max", "clutter_outside_objects", "raster", "seed"},
                         "scene spec");
  SceneSpec s;
  detail::read_key(j, "width", s.width);
  detail::read_key(j, "height", s.height);
  if (j.contains("placements"))
    for (const auto& p : j.at("placements")) {
      detail::reject_unknown(p, {"template", "cx", "cy", "scale", "depth"}, "placement");
      Placement q;
      detail::read_key(p, "template", q.template_index);
      detail::read_key(p, "cx", q.cx);
      detail::read_key(p, "cy", q.cy);
      detail::read_key(p, "scale", q.scale);
      detail::read_key(p, "depth", q.depth);
      s.placements.push_back(q);
    }
  detail::read_key(j, "clutter", s.clutter);
  detail::read_key(j, "random_clutter", s.random_clutter);
  detail::read_key(j, "decoys", s.decoys);
  detail::read_key(j, "decoy_parts", s.decoy_parts);
  detail::read_key(j, "descriptor_noise", s.descriptor_noise);
  detail::read_key(j, "position_jitter", s.position_jitter);
  detail::read_key(j, "scale_jitter", s.scale_jitter);
  detail::read_key(j, "depth_jitter", s.depth_jitter);
  detail::read_key(j, "part_dropout", s.part_dropout);
  detail::read_key(j, "missing_depth", s.missing_depth);
  detail::read_key(j, "clutter_depth_min", s.clutter_depth_min);
  detail::read_key(j, "clutter_depth_max", s.clutter_depth_max);
  detail::read_key(j, "clutter_scale_min", s.clutter_scale_min);
  detail::read_key(j, "clutter_scale_max", s.clutter_scale_max);
  detail::read_key(j, "clutter_outside_objects", s.clutter_outside_objects);
  detail::read_key(j, "raster", s.raster);
  detail::read_key(j, "seed", s.seed);
  return s;
}

}  // namespace ism3d::synth
