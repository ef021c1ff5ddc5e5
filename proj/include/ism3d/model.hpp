#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ism3d/codebook.hpp"
#include "ism3d/common.hpp"
#include "ism3d/features.hpp"
#include "ism3d/image.hpp"

namespace ism3d {

// Square binary patch cut from a training mask around a feature's support.
struct MaskPatch {
  int side = 0;
  std::vector<std::uint8_t> pixels;  // side x side, 0/1

  std::uint8_t at(int u, int v) const { return pixels[static_cast<std::size_t>(v) * side + u]; }
  bool operator==(const MaskPatch&) const = default;
  auto operator<=>(const MaskPatch&) const = default;
};

// One learned occurrence of a word: offset of the feature from the object
// center (feature - center), training scale, class, and mask patch.
struct Occurrence {
  std::size_t word_id = 0;
  std::size_t class_id = 0;
  double x = 0.0;
  double y = 0.0;
  double scale = 1.0;
  MaskPatch mask;

  bool operator==(const Occurrence&) const = default;
};

inline bool occurrence_less(const Occurrence& a, const Occurrence& b) {
  return std::tie(a.word_id, a.class_id, a.x, a.y, a.scale, a.mask) <
         std::tie(b.word_id, b.class_id, b.x, b.y, b.scale, b.mask);
}

struct TrainingSample {
  ImageRGBD image;
  std::size_t class_id = 0;
  BinaryMask mask;
};

// Training sample whose features were extracted elsewhere (feature files,
// synthetic scenes).
struct FeatureSample {
  FeatureSet features;
  std::size_t class_id = 0;
  BinaryMask mask;
};

struct LearnParams {
  double t_cluster = 0.7;
  double t_match = 0.7;
  std::size_t t_q = 0;
  double t_ig = 0.0;
  double support_factor = 16.0;
  ExtractionParams extraction;

  bool operator==(const LearnParams& o) const {
    return t_cluster == o.t_cluster && t_match == o.t_match && t_q == o.t_q && t_ig == o.t_ig &&
           support_factor == o.support_factor && extraction.levels == o.extraction.levels &&
           extraction.sigma0 == o.extraction.sigma0 && extraction.scale_step == o.extraction.scale_step &&
           extraction.integration_factor == o.extraction.integration_factor &&
           extraction.harris_k == o.extraction.harris_k && extraction.threshold == o.extraction.threshold &&
           extraction.border == o.extraction.border && extraction.grid == o.extraction.grid &&
           extraction.orientation_bins == o.extraction.orientation_bins &&
           extraction.support_factor == o.extraction.support_factor &&
           extraction.max_features == o.extraction.max_features;
  }
};

inline nlohmann::json to_json(const LearnParams& p) {
  const auto& e = p.extraction;
  return {{"t_cluster", p.t_cluster},
          {"t_match", p.t_match},
          {"t_q", p.t_q},
          {"t_ig", p.t_ig},
          {"support_factor", p.support_factor},
          {"extraction",
           {{"levels", e.levels},
            {"sigma0", e.sigma0},
            {"scale_step", e.scale_step},
            {"integration_factor", e.integration_factor},
            {"harris_k", e.harris_k},
            {"threshold", e.threshold},
            {"border", e.border},
            {"grid", e.grid},
            {"orientation_bins", e.orientation_bins},
            {"support_factor", e.support_factor},
            {"max_features", e.max_features}}}};
}

// Missing keys keep their defaults so older snapshots still load.
inline LearnParams learn_params_from_json(const nlohmann::json& j) {
  LearnParams p;
  auto get = [](const nlohmann::json& o, const char* k, auto& v) {
    if (o.contains(k)) v = o.at(k).get<std::decay_t<decltype(v)>>();
  };
  get(j, "t_cluster", p.t_cluster);
  get(j, "t_match", p.t_match);
  get(j, "t_q", p.t_q);
  get(j, "t_ig", p.t_ig);
  get(j, "support_factor", p.support_factor);
  if (j.contains("extraction")) {
    const auto& e = j.at("extraction");
    auto& x = p.extraction;
    get(e, "levels", x.levels);
    get(e, "sigma0", x.sigma0);
    get(e, "scale_step", x.scale_step);
    get(e, "integration_factor", x.integration_factor);
    get(e, "harris_k", x.harris_k);
    get(e, "threshold", x.threshold);
    get(e, "border", x.border);
    get(e, "grid", x.grid);
    get(e, "orientation_bins", x.orientation_bins);
    get(e, "support_factor", x.support_factor);
    get(e, "max_features", x.max_features);
  }
  return p;
}

struct Model {
  Codebook codebook;
  std::vector<Occurrence> occurrences;  // sorted by occurrence_less
  LearnParams params;

  std::size_t n_classes() const { return codebook.n_classes(); }
  const std::vector<std::string>& class_names() const { return codebook.class_names; }

  // Occurrence index range [first, last) of a word.
  std::pair<std::size_t, std::size_t> range_of(std::size_t word_id) const {
    auto lo = std::lower_bound(occurrences.begin(), occurrences.end(), word_id,
                               [](const Occurrence& o, std::size_t w) { return o.word_id < w; });
    auto hi = std::upper_bound(lo, occurrences.end(), word_id,
                               [](std::size_t w, const Occurrence& o) { return w < o.word_id; });
    return {static_cast<std::size_t>(lo - occurrences.begin()), static_cast<std::size_t>(hi - occurrences.begin())};
  }

  bool operator==(const Model&) const = default;
};

// Center of the mask's bounding box.
inline std::pair<double, double> object_center(const BinaryMask& mask) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw Error("object_center: empty mask");
  return {0.5 * (x0 + x1), 0.5 * (y0 + y1)};
}

inline int patch_side(double scale, double support_factor) {
  return std::max(1, static_cast<int>(std::lround(support_factor * scale)));
}

// Crops a side x side patch centered on (x, y); pixels outside the mask are 0.
inline MaskPatch crop_patch(const BinaryMask& mask, double x, double y, double scale, double support_factor) {
  MaskPatch p;
  p.side = patch_side(scale, support_factor);
  p.pixels.assign(static_cast<std::size_t>(p.side) * p.side, 0);
  const double ox = x - 0.5 * (p.side - 1), oy = y - 0.5 * (p.side - 1);
  for (int v = 0; v < p.side; ++v)
    for (int u = 0; u < p.side; ++u) {
      const int px = static_cast<int>(std::lround(ox + u)), py = static_cast<int>(std::lround(oy + v));
      if (mask.contains(px, py)) p.pixels[static_cast<std::size_t>(v) * p.side + u] = mask.at(px, py);
    }
  return p;
}

inline bool inside_mask(const BinaryMask& mask, double x, double y) {
  const int px = static_cast<int>(std::lround(x)), py = static_cast<int>(std::lround(y));
  return mask.contains(px, py) && mask.at(px, py);
}

// Concatenated descriptors of all sample features, in sample order.
inline std::vector<Descriptor> collect_descriptors(std::span<const FeatureSample> samples) {
  std::vector<Descriptor> out;
  for (const auto& s : samples)
    for (const auto& f : s.features) out.push_back(f.descriptor);
  return out;
}

// counts[i][c] = activations of codebook word i by features of class-c
// training samples (every feature, inside or outside the mask).
inline std::vector<std::vector<std::size_t>> count_activations(const Codebook& cb, std::span<const FeatureSample> samples,
                                                               double t_match) {
  std::vector<std::vector<std::size_t>> counts(cb.size(), std::vector<std::size_t>(cb.n_classes(), 0));
  for (const auto& s : samples) {
    if (s.class_id >= cb.n_classes()) throw Error("count_activations: class id out of range");
    for (const auto& f : s.features)
      for (const auto& a : match(cb, f.descriptor, t_match)) ++counts[cb.index_of(a.word_id)][s.class_id];
  }
  return counts;
}

// Occurrences from in-mask activations; offsets are feature - object center.
inline Model train(std::span<const FeatureSample> samples, Codebook codebook, const LearnParams& params) {
  const std::size_t n = codebook.n_classes();
  std::vector<std::size_t> per_class(n, 0);
  Model m;
  m.params = params;
  for (std::size_t si = 0; si < samples.size(); ++si) {
    const auto& s = samples[si];
    if (s.class_id >= n) throw Error("train: sample " + std::to_string(si) + " has class id out of range");
    if (s.mask.count() == 0) throw Error("train: sample " + std::to_string(si) + " has an empty mask");
    ++per_class[s.class_id];
    const auto [cx, cy] = object_center(s.mask);
    for (const auto& f : s.features) {
      if (!inside_mask(s.mask, f.x, f.y)) continue;
      for (const auto& a : match(codebook, f.descriptor, params.t_match))
        m.occurrences.push_back(
            {a.word_id, s.class_id, f.x - cx, f.y - cy, f.scale, crop_patch(s.mask, f.x, f.y, f.scale, params.support_factor)});
    }
  }
  for (std::size_t c = 0; c < n; ++c)
    if (per_class[c] == 0) throw Error("train: no training sample for class '" + codebook.class_names[c] + "'");
  std::sort(m.occurrences.begin(), m.occurrences.end(), occurrence_less);
  m.codebook = std::move(codebook);
  return m;
}

inline std::vector<FeatureSample> extract_samples(std::span<const TrainingSample> samples, const ExtractionParams& ep) {
  std::vector<FeatureSample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.mask.width != s.image.width || s.mask.height != s.image.height)
      throw Error("sample " + std::to_string(i) + ": mask dimensions differ from the image");
    FeatureSet fs = extract_features(s.image, ep);
    if (s.image.depth) fs = attach_depth(std::move(fs), *s.image.depth);
    out.push_back({std::move(fs), s.class_id, s.mask});
  }
  return out;
}

inline Model train(std::span<const TrainingSample> samples, Codebook codebook, const LearnParams& params) {
  const auto fs = extract_samples(samples, params.extraction);
  return train(std::span<const FeatureSample>(fs), std::move(codebook), params);
}

// Codebook learning from all training features of all classes, then size
// pruning (t_q), statistics, gains and gain pruning (t_ig).
inline Codebook learn_codebook(std::span<const FeatureSample> samples, std::vector<std::string> class_names,
                               const LearnParams& params) {
  const auto descriptors = collect_descriptors(samples);
  Codebook cb = prune_small_clusters(cluster_rnn(descriptors, params.t_cluster, std::move(class_names)), params.t_q);
  if (cb.size() == 0) return cb;
  const auto counts = count_activations(cb, samples, params.t_match);
  std::size_t total = 0;
  for (const auto& r : counts)
    for (auto v : r) total += v;
  if (total == 0) return cb;
  const auto st = word_statistics(cb, counts);
  apply_statistics(cb, st, counts);
  if (params.t_ig > 0.0) cb = prune_by_stored_gain(cb, params.t_ig).codebook;
  return cb;
}

inline Model learn(std::span<const FeatureSample> samples, std::vector<std::string> class_names, const LearnParams& params) {
  return train(samples, learn_codebook(samples, std::move(class_names), params), params);
}

// ---------------------------------------------------------------------------
// Model file: "ISM3D", u16 version, then tagged sections
//   u32 tag | u64 payload length | payload
// Required: "CBK " codebook, "OCC " occurrences, "CFG " config JSON; "END "
// terminates. Unknown tags are skipped, so optional sections can be added
// without breaking old readers. All integers little-endian, doubles IEEE-754.
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[5] = {'I', 'S', 'M', '3', 'D'};
inline constexpr std::uint16_t kModelVersion = 1;

namespace binio {

constexpr std::uint32_t tag(const char (&s)[5]) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(s[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[3])) << 24;
}

class Writer {
 public:
  std::vector<unsigned char> buf;
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u16(std::uint16_t v) { uint(v); }
  void u32(std::uint32_t v) { uint(v); }
  void u64(std::uint64_t v) { uint(v); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    auto c = static_cast<const unsigned char*>(p);
    buf.insert(buf.end(), c, c + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void section(std::uint32_t t, const Writer& payload) {
    u32(t);
    u64(payload.buf.size());
    bytes(payload.buf.data(), payload.buf.size());
  }
};

class Reader {
 public:
  Reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::uint16_t u16() { return uint<std::uint16_t>(); }
  std::uint32_t u32() { return uint<std::uint32_t>(); }
  std::uint64_t u64() { return uint<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(u64()); }
  const unsigned char* take(std::size_t n) {
    need(n);
    const unsigned char* r = p_ + pos_;
    pos_ += n;
    return r;
  }
  std::string str() {
    const auto n = u32();
    auto q = take(n);
    return std::string(reinterpret_cast<const char*>(q), n);
  }
  bool done() const { return pos_ == n_; }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > n_ - pos_) throw FormatError("model file truncated");
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace binio

inline std::vector<unsigned char> serialize_model(const Model& m) {
  using binio::tag;
  binio::Writer out;
  out.bytes(kModelMagic, sizeof kModelMagic);
  out.u16(kModelVersion);

  const auto& cb = m.codebook;
  binio::Writer c;
  c.u64(cb.descriptor_dim);
  c.u32(static_cast<std::uint32_t>(cb.class_names.size()));
  for (const auto& name : cb.class_names) c.str(name);
  c.u64(cb.words.size());
  for (const auto& w : cb.words) {
    c.u64(w.id);
    c.u64(w.member_count);
    c.f64(w.gain);
    c.u32(static_cast<std::uint32_t>(w.activations_by_class.size()));
    for (auto a : w.activations_by_class) c.u64(a);
    for (double v : w.centroid) c.f64(v);
  }
  out.section(tag("CBK "), c);

  binio::Writer o;
  o.u64(m.occurrences.size());
  for (const auto& oc : m.occurrences) {
    o.u64(oc.word_id);
    o.u32(static_cast<std::uint32_t>(oc.class_id));
    o.f64(oc.x);
    o.f64(oc.y);
    o.f64(oc.scale);
    o.u32(static_cast<std::uint32_t>(oc.mask.side));
    o.bytes(oc.mask.pixels.data(), oc.mask.pixels.size());
  }
  out.section(tag("OCC "), o);

  binio::Writer g;
  const std::string cfg = to_json(m.params).dump();
  g.bytes(cfg.data(), cfg.size());
  out.section(tag("CFG "), g);

  out.section(tag("END "), binio::Writer{});
  return out.buf;
}

inline Model deserialize_model(std::span<const unsigned char> data) {
  using binio::tag;
  binio::Reader in(data.data(), data.size());
  if (data.size() < sizeof kModelMagic || std::memcmp(data.data(), kModelMagic, sizeof kModelMagic) != 0)
    throw FormatError("not an ISM3D model file (bad magic)");
  in.take(sizeof kModelMagic);
  const auto version = in.u16();
  if (version == 0 || version > kModelVersion)
    throw FormatError("unsupported model version " + std::to_string(version));

  Model m;
  bool have_cbk = false, have_occ = false, have_end = false;
  while (!in.done()) {
    const auto t = in.u32();
    const auto len = in.u64();
    if (len > in.remaining()) throw FormatError("model file truncated");
    binio::Reader s(in.take(len), len);
    if (t == tag("CBK ")) {
      auto& cb = m.codebook;
      cb.descriptor_dim = s.u64();
      const auto nc = s.u32();
      for (std::uint32_t i = 0; i < nc; ++i) cb.class_names.push_back(s.str());
      const auto nw = s.u64();
      for (std::uint64_t i = 0; i < nw; ++i) {
        Word w;
        w.id = s.u64();
        w.member_count = s.u64();
        w.gain = s.f64();
        const auto na = s.u32();
        for (std::uint32_t k = 0; k < na; ++k) w.activations_by_class.push_back(s.u64());
        w.centroid.resize(cb.descriptor_dim);
        for (auto& v : w.centroid) v = s.f64();
        cb.words.push_back(std::move(w));
      }
      have_cbk = true;
    } else if (t == tag("OCC ")) {
      const auto n = s.u64();
      for (std::uint64_t i = 0; i < n; ++i) {
        Occurrence oc;
        oc.word_id = s.u64();
        oc.class_id = s.u32();
        oc.x = s.f64();
        oc.y = s.f64();
        oc.scale = s.f64();
        oc.mask.side = static_cast<int>(s.u32());
        const std::size_t np = static_cast<std::size_t>(oc.mask.side) * oc.mask.side;
        auto px = s.take(np);
        oc.mask.pixels.assign(px, px + np);
        m.occurrences.push_back(std::move(oc));
      }
      have_occ = true;
    } else if (t == tag("CFG ")) {
      auto txt = s.take(len);
      try {
        m.params = learn_params_from_json(nlohmann::json::parse(txt, txt + len));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model config section: ") + e.what());
      }
    } else if (t == tag("END ")) {
      have_end = true;
      break;
    }
    // Unknown sections are skipped.
  }
  if (!have_cbk || !have_occ || !have_end) throw FormatError("model file truncated or missing sections");
  for (const auto& oc : m.occurrences) {
    if (m.codebook.index_of(oc.word_id) == Codebook::npos) throw FormatError("occurrence refers to unknown word");
    if (oc.class_id >= m.codebook.n_classes()) throw FormatError("occurrence class out of range");
  }
  return m;
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
  const auto bytes = serialize_model(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

inline Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace ism3d
