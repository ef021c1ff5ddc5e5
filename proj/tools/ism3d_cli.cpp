#include <openssl/evp.h>

#ifdef ISM3D_CLI11_SINGLE_HEADER
#include <CLI11.hpp>
#else
#include <CLI/CLI.hpp>
#endif

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ism3d/ism3d.hpp"

#ifndef ISM3D_VERSION
#define ISM3D_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ism3d;

namespace {

// Bad flags, bad config keys, incompatible inputs: exit status 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    static const char* digits = "0123456789abcdef";
    hex << digits[md[i] >> 4] << digits[md[i] & 15];
  }
  return hex.str();
}

// Flags that double as --config keys (dashes become underscores).
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_, "JSON file whose keys override the flags")->check(CLI::ExistingFile);
  }

  // `alias` is an extra spelling of the flag only; the config key stays `name`.
  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help, const std::string& alias = "") {
    const std::string k = key(name);
    set_[k] = [&var](const json& j) { var = j.get<T>(); };
    get_[k] = [&var] { return json(var); };
    const std::string flags = "--" + name + (alias.empty() ? "" : ",--" + alias);
    return app_->add_option(flags, var, help)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    const std::string k = key(name);
    set_[k] = [&var](const json& j) { var = j.get<bool>(); };
    get_[k] = [&var] { return json(var); };
    return app_->add_flag("--" + name, var, help);
  }

  void apply_config() {
    if (config_.empty()) return;
    std::ifstream in(config_);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config " + config_ + ": " + e.what());
    }
    if (!j.is_object()) throw UsageError("config " + config_ + ": expected a JSON object");
    for (const auto& [k, v] : j.items()) {
      auto it = set_.find(k);
      if (it == set_.end()) throw UsageError("config " + config_ + ": unknown key '" + k + "'");
      try {
        it->second(v);
      } catch (const json::exception&) {
        throw UsageError("config " + config_ + ": bad value for '" + k + "'");
      }
    }
  }

  json effective() const {
    json j = json::object();
    for (const auto& [k, g] : get_) j[k] = g();
    return j;
  }

 private:
  static std::string key(std::string s) {
    std::replace(s.begin(), s.end(), '-', '_');
    return s;
  }

  CLI::App* app_;
  std::string config_;
  std::map<std::string, std::function<void(const json&)>> set_;
  std::map<std::string, std::function<json()>> get_;
};

// Every input file read by a run, hashed into the manifest.
class Inputs {
 public:
  void add(const fs::path& p) {
    std::lock_guard lock(mutex_);
    paths_.insert(p.lexically_normal().generic_string());
  }
  json to_json() const {
    json a = json::array();
    for (const auto& p : paths_) a.push_back({{"path", p}, {"sha256", sha256_file(p)}});
    return a;
  }

 private:
  mutable std::mutex mutex_;
  std::set<std::string> paths_;
};

void write_manifest(const fs::path& path, const std::string& command, const Options& opts, const Inputs& inputs) {
  json m;
  m["tool"] = "ism3d";
  m["version"] = ISM3D_VERSION;
  m["model_format"] = kModelVersion;
  m["command"] = command;
  m["config"] = opts.effective();
  m["inputs"] = inputs.to_json();
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << m.dump(2) << '\n';
}

fs::path sibling_manifest(const fs::path& file) { return fs::path(file.string() + ".manifest.json"); }

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

// --- dataset layout: <root>/<class>/<id>.{img,depth,mask,feat} -------------

struct Item {
  std::string cls;
  std::string id;
  fs::path base;  // without extension

  std::string key() const { return cls + "/" + id; }
  fs::path with(const char* ext) const { return fs::path(base.string() + ext); }
};

std::vector<std::string> dataset_classes(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error("dataset root " + root.string() + " is not a directory");
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && e.path().filename().string().front() != '.') out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw Error("dataset root " + root.string() + " has no class directories");
  return out;
}

std::vector<Item> scan_dataset(const fs::path& root) {
  std::vector<Item> items;
  for (const auto& cls : dataset_classes(root)) {
    std::set<std::string> ids;
    for (const auto& e : fs::directory_iterator(root / cls)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".feat" || ext == ".img")) ids.insert(e.path().stem().string());
    }
    for (const auto& id : ids) items.push_back({cls, id, root / cls / id});
  }
  return items;
}

struct Loaded {
  FeatureSet features;
  int width = 0;
  int height = 0;
  bool has_depth = false;
};

// Precomputed .feat wins over .img; image size comes from the image, the
// mask, or the fallback.
Loaded load_item(const Item& it, const ExtractionParams& ep, int fallback_w, int fallback_h, Inputs& inputs) {
  Loaded l;
  if (fs::exists(it.with(".feat"))) {
    inputs.add(it.with(".feat"));
    l.features = read_features(it.with(".feat"));
    l.has_depth = std::any_of(l.features.begin(), l.features.end(), [](const Feature& f) { return f.depth.has_value(); });
    l.width = fallback_w;
    l.height = fallback_h;
    if (fs::exists(it.with(".mask"))) {
      inputs.add(it.with(".mask"));
      const auto m = read_mask(it.with(".mask"));
      l.width = m.width;
      l.height = m.height;
    }
    return l;
  }
  inputs.add(it.with(".img"));
  ImageRGBD img = read_intensity(it.with(".img"));
  if (fs::exists(it.with(".depth"))) {
    inputs.add(it.with(".depth"));
    img.set_depth(read_depth(it.with(".depth")));
  }
  l.width = img.width;
  l.height = img.height;
  l.has_depth = img.depth.has_value();
  l.features = extract_features(img, ep);
  if (img.depth) l.features = attach_depth(std::move(l.features), *img.depth);
  return l;
}

std::vector<Loaded> load_all(const std::vector<Item>& items, const ExtractionParams& ep, int w, int h, std::size_t workers,
                             Inputs& inputs) {
  std::vector<Loaded> out(items.size());
  parallel_for(items.size(), workers, [&](std::size_t i) { out[i] = load_item(items[i], ep, w, h, inputs); });
  return out;
}

void require_depth(const std::vector<Item>& items, const std::vector<Loaded>& loaded, Variant v) {
  if (!uses_depth(v)) return;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (!loaded[i].has_depth)
      throw UsageError("variant " + std::string(to_string(v)) + " needs depth, but " + items[i].key() +
                       " has no depth map (use ism or jism, or supply <id>.depth)");
}

// --- shared option groups ---------------------------------------------------

struct ExtractOpts {
  ExtractionParams p;
  void add(Options& o) {
    o.add("levels", p.levels, "scale-space levels");
    o.add("sigma0", p.sigma0, "differentiation scale of the first level");
    o.add("harris-threshold", p.threshold, "minimum scale-normalized Harris response");
    o.add("max-features", p.max_features, "keep the strongest N features per image (0 = all)");
  }
};

struct LearnOpts {
  LearnParams p;
  void add(Options& o) {
    o.add("t-cluster", p.t_cluster, "clustering similarity cut-off");
    o.add("t-match", p.t_match, "word activation similarity threshold");
    o.add("t-q", p.t_q, "drop words with at most this many members");
    o.add("t-ig", p.t_ig, "drop words with lower information gain (bits)");
    o.add("support-factor", p.support_factor, "mask patch side per unit feature scale");
  }
};

struct DetectOpts {
  std::string variant = "ji3sm3";
  DetectorConfig c;
  void add(Options& o) {
    o.add("variant", variant, "voting space: ism, jism, ji3sm1, ji3sm2, ji3sm3");
    o.add("b-xy", c.bandwidths.xy, "position bandwidth (px)");
    o.add("b-s", c.bandwidths.s, "scale bandwidth");
    o.add("b-d", c.bandwidths.d, "depth bandwidth (m)");
    o.add("b-sd", c.bandwidths.sd, "depth*scale bandwidth");
    o.add("t-ratio", c.t_ratio, "keep hypotheses scoring at least this fraction of the best");
    o.add("t-match", c.t_match, "word activation similarity threshold");
    o.add("max-detections", c.max_detections, "per image (0 = unlimited)");
  }
  DetectorConfig config() const {
    auto v = parse_variant(variant);
    if (!v) throw UsageError("unknown variant '" + variant + "'");
    DetectorConfig out = c;
    out.variant = *v;
    try {
      out.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    return out;
  }
};

struct GridOpts {
  double lo, hi;
  std::size_t n;
  GridOpts(double l, double h, std::size_t k) : lo(l), hi(h), n(k) {}
  void add(Options& o) {
    o.add("grid-lo", lo, "first grid value");
    o.add("grid-hi", hi, "last grid value");
    o.add("grid-n", n, "number of grid points");
  }
  std::vector<double> values() const {
    if (n == 0) throw UsageError("grid-n must be positive");
    return linear_grid(lo, hi, n);
  }
};

// --- commands ---------------------------------------------------------------

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<Options> opts;
  std::function<void()> run;
  std::string name;
};

void csv_escape_free(const std::string& s) {
  if (s.find_first_of(",\n\"") != std::string::npos) throw Error("name '" + s + "' cannot be written to CSV");
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double csv_number(const std::string& s, const fs::path& file, std::size_t line) {
  double v;
  if (!parse_double(s, v)) throw FormatError(file.string() + ": not a number: '" + s + "'", line);
  return v;
}

void register_extract(CLI::App& root, std::vector<Command>& cmds) {
  struct S {
    std::string data, out;
    std::size_t workers = 1;
    ExtractOpts ex;
  };
  auto s = std::make_shared<S>();
  Command c;
  c.name = "extract";
  c.app = root.add_subcommand("extract", "Extract features from <root>/<class>/<id>.img (+ .depth) into .feat files");
  c.opts = std::make_unique<Options>(c.app);
  c.opts->add("data", s->data, "dataset root")->required();
  c.opts->add("out", s->out, "output dataset root (masks are copied along)")->required();
  c.opts->add("workers", s->workers, "worker threads");
  s->ex.add(*c.opts);
  Options* o = c.opts.get();
  c.run = [s, o] {
    Inputs inputs;
    std::vector<Item> items;
    for (auto& it : scan_dataset(s->data))
      if (fs::exists(it.with(".img"))) items.push_back(it);
    if (items.empty()) throw Error("no .img files under " + s->data);
    std::vector<Loaded> loaded(items.size());
    parallel_for(items.size(), s->workers, [&](std::size_t i) {
      Item img_only = items[i];
      Loaded l;
      inputs.add(img_only.with(".img"));
      ImageRGBD img = read_intensity(img_only.with(".img"));
      if (fs::exists(img_only.with(".depth"))) {
        inputs.add(img_only.with(".depth"));
        img.set_depth(read_depth(img_only.with(".depth")));
      }
      l.features = extract_features(img, s->ex.p);
      if (img.depth) l.features = attach_depth(std::move(l.features), *img.depth);
      loaded[i] = std::move(l);
    });
    std::size_t total = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      const fs::path dst = fs::path(s->out) / items[i].cls / items[i].id;
      fs::create_directories(dst.parent_path());
      write_features(loaded[i].features, fs::path(dst.string() + ".feat"), s->ex.p.descriptor_dim());
      if (fs::exists(items[i].with(".mask")) && fs::path(dst.string() + ".mask") != items[i].with(".mask")) {
        inputs.add(items[i].with(".mask"));
        fs::copy_file(items[i].with(".mask"), dst.string() + ".mask", fs::copy_options::overwrite_existing);
      }
      total += loaded[i].features.size();
    }
    write_manifest(fs::path(s->out) / "manifest.json", "extract", *o, inputs);
    std::cout << items.size() << " images, " << total << " features\n";
  };
  cmds.push_back(std::move(c));
}

std::vector<FeatureSample> load_training(const fs::path& root, const ExtractionParams& ep, std::size_t workers,
                                         std::vector<std::string>& classes, Inputs& inputs) {
  classes = dataset_classes(root);
  const auto items = scan_dataset(root);
  if (items.empty()) throw Error("no training images under " + root.string());
  const auto loaded = load_all(items, ep, 0, 0, workers, inputs);
  std::vector<FeatureSample> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!fs::exists(items[i].with(".mask"))) throw Error("training item " + items[i].key() + " has no .mask");
    inputs.add(items[i].with(".mask"));
    const auto cls = static_cast<std::size_t>(std::find(classes.begin(), classes.end(), items[i].cls) - classes.begin());
    out.push_back({loaded[i].features, cls, read_mask(items[i].with(".mask"))});
  }
  return out;
}

void register_train(CLI::App& root, std::vector<Command>& cmds) {
  struct S {
    std::string data, model;
    std::size_t workers = 1;
    ExtractOpts ex;
    LearnOpts learn;
  };
  auto s = std::make_shared<S>();
  Command c;
  c.name = "train";
  c.app = root.add_subcommand("train", "Learn codebook and occurrences from a masked training set");
  c.opts = std::make_unique<Options>(c.app);
  c.opts->add("data", s->data, "training dataset root")->required();
  c.opts->add("model", s->model, "model file to write")->required();
  c.opts->add("workers", s->workers, "worker threads for feature loading");
  s->ex.add(*c.opts);
  s->learn.add(*c.opts);
  Options* o = c.opts.get();
  c.run = [s, o] {
    Inputs inputs;
    LearnParams lp = s->learn.p;
    lp.extraction = s->ex.p;
    std::vector<std::string> classes;
    const auto samples = load_training(s->data, lp.extraction, s->workers, classes, inputs);
    const Model m = learn(samples, classes, lp);
    if (fs::path(s->model).has_parent_path()) fs::create_directories(fs::path(s->model).parent_path());
    save_model(m, s->model);
    write_manifest(sibling_manifest(s->model), "train", *o, inputs);
    std::cout << classes.size() << " classes, " << m.codebook.size() << " words, " << m.occurrences.size()
              << " occurrences\n";
  };
  cmds.push_back(std::move(c));
}

void register_prune(CLI::App& root, std::vector<Command>& cmds) {
  struct S {
    std::string model, out;
    std::size_t t_q = 0;
    double t_ig = 0.0;
  };
  auto s = std::make_shared<S>();
  Command c;
  c.name = "prune";
  c.app = root.add_subcommand("prune", "Drop small or uninformative words from a model");
  c.opts = std::make_unique<Options>(c.app);
  c.opts->add("model", s->model, "input model")->required();
  c.opts->add("out", s->out, "output model")->required();
  c.opts->add("t-q", s->t_q, "drop words with at most this many members", "tq");
  c.opts->add("t-ig", s->t_ig, "drop words with lower information gain (bits)", "tig");
  Options* o = c.opts.get();
  c.run = [s, o] {
    if (s->t_ig < 0) throw UsageError("t-ig must be non-negative");
    Inputs inputs;
    inputs.add(s->model);
    Model m = load_model(s->model);
    const std::size_t before = m.codebook.size();
    m.codebook = prune_by_stored_gain(prune_small_clusters(std::move(m.codebook), s->t_q), s->t_ig).codebook;
    std::erase_if(m.occurrences, [&](const Occurrence& oc) { return m.codebook.index_of(oc.word_id) == Codebook::npos; });
    m.params.t_q = std::max(m.params.t_q, s->t_q);
    m.params.t_ig = std::max(m.params.t_ig, s->t_ig);
    if (fs::path(s->out).has_parent_path()) fs::create_directories(fs::path(s->out).parent_path());
    save_model(m, s->out);
    write_manifest(sibling_manifest(s->out), "prune", *o, inputs);
    std::cout << before << " -> " << m.codebook.size() << " words\n";
  };
  cmds.push_back(std::move(c));
}

void write_detection_rows(std::ostream& out, const std::string& image, const DetectionRun& run) {
  for (const auto& d : run.detections) {
    out << image << ',' << d.class_name << ',' << format_double(d.score) << ',' << format_double(d.ratio) << ','
        << format_double(d.x) << ',' << format_double(d.y) << ',' << (d.coord3 ? format_double(*d.coord3) : "") << ','
        << (d.depth ? format_double(*d.depth) : "") << '\n';
  }
}

void register_detect(CLI::App& root, std::vector<Command>& cmds) {
  struct S {
    std::string model, data, out;
    std::size_t workers = 1;
    int width = 320, height = 240;
    bool masks = false;
    DetectOpts det;
  };
  auto s = std::make_shared<S>();
  Command c;
  c.name = "detect";
  c.app = root.add_subcommand("detect", "Detect objects in every image of a dataset");
  c.opts = std::make_unique<Options>(c.app);
  c.opts->add("model", s->model, "model file")->required();
  c.opts->add("data", s->data, "dataset root")->required();
  c.opts->add("out", s->out, "output directory")->required();
  c.opts->add("workers", s->workers, "worker threads");
  c.opts->add("width", s->width, "image width for .feat inputs without a mask");
  c.opts->add("height", s->height, "image height for .feat inputs without a mask");
  c.opts->flag("masks", s->masks, "write a segmentation mask per detection");
  s->det.add(*c.opts);
  Options* o = c.opts.get();
  c.run = [s, o] {
    DetectorConfig cfg = s->det.config();
    cfg.segment = s->masks;
    Inputs inputs;
    inputs.add(s->model);
    const Model model = load_model(s->model);
    const auto items = scan_dataset(s->data);
    const auto loaded = load_all(items, model.params.extraction, s->width, s->height, s->workers, inputs);
    require_depth(items, loaded, cfg.variant);
    std::vector<DetectionRun> runs(items.size());
    parallel_for(items.size(), s->workers, [&](std::size_t i) {
      runs[i] = detect_features(loaded[i].features, loaded[i].width, loaded[i].height, model, cfg);
    });

    const fs::path out(s->out);
    auto det = open_out(out / "detections.csv");
    auto hyp = open_out(out / "hypotheses.csv");
    det << "image,class,score,ratio,x,y,c3,depth\n";
    hyp << "image,class,score,ratio,x,y\n";
    std::size_t n = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      csv_escape_free(items[i].key());
      write_detection_rows(det, items[i].key(), runs[i]);
      for (const auto& h : scored_hypotheses(runs[i]))
        hyp << items[i].key() << ',' << model.class_names()[h.class_id] << ',' << format_double(h.score) << ','
            << format_double(h.ratio) << ',' << format_double(h.x) << ',' << format_double(h.y) << '\n';
      for (std::size_t k = 0; k < runs[i].detections.size(); ++k) {
        const auto& d = runs[i].detections[k];
        if (!d.segmentation) continue;
        const fs::path p = out / "masks" / items[i].cls / (items[i].id + "_" + std::to_string(k) + ".mask");
        fs::create_directories(p.parent_path());
        write_mask(d.segmentation->mask, p);
      }
      n += runs[i].detections.size();
    }
    write_manifest(out / "manifest.json", "detect", *o, inputs);
    std::cout << items.size() << " images, " << n << " detections\n";
  };
  cmds.push_back(std::move(c));
}

void register_segment(CLI::App& root, std::vector<Command>& cmds) {
  struct S {
    std::string model, image, depth, features, out;
    int width = 320, height = 240;
    DetectOpts det;
  };
  auto s = std::make_shared<S>();
  Command c;
  c.name = "segment";
  c.app = root.add_subcommand("segment", "Detect in one image and write figure/ground maps and masks");
  c.opts = std::make_unique<Options>(c.app);
  c.opts->add("model", s->model, "model file")->required();
  c.opts->add("image", s->image, "intensity image (.img)");
  c.opts->add("depth", s->depth, "depth map for --image");
  c.opts->add("features", s->features, "precomputed feature file (.feat) instead of --image");
  c.opts->add("width", s->width, "image width for --features");
  c.opts->add("height", s->height, "image height for --features");
  c.opts->add("out", s->out, "output directory")->required();
  s->det.add(*c.opts);
  Options* o = c.opts.get();
  c.run = [s, o] {
    if (s->image.empty() == s->features.empty()) throw UsageError("give exactly one of --image and --features");
    DetectorConfig cfg = s->det.config();
    Inputs inputs;
    inputs.add(s->model);
    const Model model = load_model(s->model);
    FeatureSet fs;
    int w = s->width, h = s->height;
    if (!s->image.empty()) {
      inputs.add(s->image);
      ImageRGBD img = read_intensity(s->image);
      if (!s->depth.empty()) {
        inputs.add(s->depth);
        img.set_depth(read_depth(s->depth));
      }
      if (uses_depth(cfg.variant) && !img.depth)
        throw UsageError("variant " + std::string(to_string(cfg.variant)) + " needs --depth");
      fs = image_features(img, model);
      w = img.width;
      h = img.height;
    } else {
      inputs.add(s->features);
      fs = read_features(s->features);
      if (uses_depth(cfg.variant) && std::none_of(fs.begin(), fs.end(), [](const Feature& f) { return f.depth.has_value(); }))
        throw UsageError("variant " + std::string(to_string(cfg.variant)) + " needs features with depth");
    }
    const auto run = detect_features(fs, w, h, model, cfg);
    const fs::path out(s->out);
    auto det = open_out(out / "detections.csv");
    det << "image,class,score,ratio,x,y,c3,depth\n";
    write_detection_rows(det, "0", run);
    for (std::size_t k = 0; k < run.detections.size(); ++k) {
      const auto& seg = *run.detections[k].segmentation;
      const std::string stem = "det" + std::to_string(k);
      write_mask(seg.mask, out / (stem + ".mask"));
      write_map(seg.figure, out / (stem + "_figure.pgm"));
      write_map(seg.ground, out / (stem + "_ground.pgm"));
    }
    write_manifest(out / "manifest.json", "segment", *o, inputs);
    std::cout << run.detections.size() << " detections\n";
  };
  cmds.push_back(std::move(c));
}

std::vector<std::size_t> class_ids(const std::vector<Item>& items, const std::vector<std::string>& classes) {
  std::vector<std::size_t> out;
  for (const auto& it : items) {
    auto p = std::find(classes.begin(), classes.end(), it.cls);
    if (p == classes.end()) throw Error(it.key() + ": class '" + it.cls + "' is not in the model");
    out.push_back(static_cast<std::size_t>(p - classes.begin()));
  }
  return out;
}

void register_eval(CLI::App& root, std::vector<Command>& cmds) {
  CLI::App* eval = root.add_subcommand("eval", "Evaluation: confusion, pr, sweep, confidence");
  eval->require_subcommand(1);

  {  // confusion
    struct S {
      std::string model, data, out;
      std::size_t workers = 1;
      DetectOpts det;
    };
    auto s = std::make_shared<S>();
    Command c;
    c.name = "eval confusion";
    c.app = eval->add_subcommand("confusion", "Classify every image by its strongest hypothesis");
    c.opts = std::make_unique<Options>(c.app);
    c.opts->add("model", s->model, "model file")->required();
    c.opts->add("data", s->data, "labeled dataset root")->required();
    c.opts->add("out", s->out, "output directory")->required();
    c.opts->add("workers", s->workers, "worker threads");
    s->det.add(*c.opts);
    Options* o = c.opts.get();
    c.run = [s, o] {
      const DetectorConfig cfg = s->det.config();
      Inputs inputs;
      inputs.add(s->model);
      const Model model = load_model(s->model);
      const auto items = scan_dataset(s->data);
      const auto truth = class_ids(items, model.class_names());
      const auto loaded = load_all(items, model.params.extraction, 0, 0, s->workers, inputs);
      require_depth(items, loaded, cfg.variant);
      std::vector<std::optional<std::size_t>> pred(items.size());
      parallel_for(items.size(), s->workers, [&](std::size_t i) { pred[i] = classify_features(loaded[i].features, model, cfg); });
      const auto m = confusion(pred, truth, model.class_names());
      const fs::path out(s->out);
      auto cm = open_out(out / "confusion.csv");
      write_confusion_csv(cm, m);
      auto pr = open_out(out / "predictions.csv");
      pr << "image,truth,predicted\n";
      for (std::size_t i = 0; i < items.size(); ++i)
        pr << items[i].key() << ',' << items[i].cls << ',' << (pred[i] ? model.class_names()[*pred[i]] : "") << '\n';
      write_manifest(out / "manifest.json", "eval confusion", *o, inputs);
      std::cout << "accuracy " << format_double(m.accuracy()) << '\n';
    };
    cmds.push_back(std::move(c));
  }

  {  // pr
    struct S {
      std::string detections, truth, out;
      GridOpts grid{0.05, 1.0, 20};
    };
    auto s = std::make_shared<S>();
    Command c;
    c.name = "eval pr";
    c.app = eval->add_subcommand("pr", "Precision/recall over a T_ratio grid from hypotheses.csv and truth.csv");
    c.opts = std::make_unique<Options>(c.app);
    c.opts->add("detections", s->detections, "hypotheses.csv written by detect")->required();
    c.opts->add("truth", s->truth, "truth.csv: image,class,x0,y0,x1,y1")->required();
    c.opts->add("out", s->out, "output directory")->required();
    s->grid.add(*c.opts);
    Options* o = c.opts.get();
    c.run = [s, o] {
      const auto grid = s->grid.values();
      Inputs inputs;
      inputs.add(s->detections);
      inputs.add(s->truth);
      std::map<std::string, std::size_t> class_index;
      std::map<std::string, std::vector<ScoredDetection>> dets;
      std::map<std::string, std::vector<GroundTruthBox>> boxes;
      auto cls = [&](const std::string& name) { return class_index.emplace(name, class_index.size()).first->second; };
      auto read_rows = [](const fs::path& p, std::size_t fields, const std::function<void(const std::vector<std::string>&, std::size_t)>& f) {
        std::ifstream in(p);
        if (!in) throw Error("cannot open " + p.string());
        std::string line;
        std::getline(in, line);  // header
        for (std::size_t n = 2; std::getline(in, line); ++n) {
          if (!line.empty() && line.back() == '\r') line.pop_back();
          if (line.empty()) continue;
          const auto row = split_csv(line);
          if (row.size() != fields)
            throw FormatError(p.string() + ": expected " + std::to_string(fields) + " fields", n);
          f(row, n);
        }
      };
      const fs::path dp(s->detections), tp(s->truth);
      read_rows(dp, 6, [&](const std::vector<std::string>& r, std::size_t n) {
        dets[r[0]].push_back({cls(r[1]), csv_number(r[2], dp, n), csv_number(r[3], dp, n), csv_number(r[4], dp, n),
                              csv_number(r[5], dp, n)});
      });
      read_rows(tp, 6, [&](const std::vector<std::string>& r, std::size_t n) {
        boxes[r[0]].push_back({cls(r[1]), csv_number(r[2], tp, n), csv_number(r[3], tp, n), csv_number(r[4], tp, n),
                               csv_number(r[5], tp, n), std::nullopt});
      });
      std::set<std::string> images;
      for (const auto& [k, v] : dets) images.insert(k);
      for (const auto& [k, v] : boxes) images.insert(k);
      std::vector<std::vector<ScoredDetection>> d;
      std::vector<std::vector<GroundTruthBox>> t;
      for (const auto& im : images) {
        d.push_back(dets[im]);
        t.push_back(boxes[im]);
      }
      const auto curve = pr_curve(d, t, grid);
      const fs::path out(s->out);
      auto f = open_out(out / "pr_curve.csv");
      write_pr_csv(f, curve);
      write_manifest(out / "manifest.json", "eval pr", *o, inputs);
      std::cout << "auc " << format_double(curve.auc()) << '\n';
    };
    cmds.push_back(std::move(c));
  }

  {  // sweep
    struct S {
      std::string data, test, out;
      std::size_t workers = 1;
      ExtractOpts ex;
      LearnOpts learn;
      DetectOpts det;
      GridOpts grid{0.0, 0.01, 21};
    };
    auto s = std::make_shared<S>();
    s->det.variant = "jism";
    Command c;
    c.name = "eval sweep";
    c.app = eval->add_subcommand("sweep", "Codebook size and accuracy over a T_IG grid");
    c.opts = std::make_unique<Options>(c.app);
    c.opts->add("data", s->data, "training dataset root")->required();
    c.opts->add("test", s->test, "labeled test dataset root")->required();
    c.opts->add("out", s->out, "output directory")->required();
    c.opts->add("workers", s->workers, "worker threads");
    s->ex.add(*c.opts);
    // t-match is shared by learning and detection; register it once.
    c.opts->add("t-cluster", s->learn.p.t_cluster, "clustering similarity cut-off");
    c.opts->add("t-q", s->learn.p.t_q, "drop words with at most this many members");
    c.opts->add("support-factor", s->learn.p.support_factor, "mask patch side per unit feature scale");
    s->det.add(*c.opts);
    s->grid.add(*c.opts);
    Options* o = c.opts.get();
    c.run = [s, o] {
      const DetectorConfig cfg = s->det.config();
      const auto grid = s->grid.values();
      Inputs inputs;
      LearnParams lp = s->learn.p;
      lp.extraction = s->ex.p;
      lp.t_match = cfg.t_match;
      lp.t_ig = 0.0;
      std::vector<std::string> classes;
      const auto train = load_training(s->data, lp.extraction, s->workers, classes, inputs);
      const auto items = scan_dataset(s->test);
      const auto truth = class_ids(items, classes);
      const auto loaded = load_all(items, lp.extraction, 0, 0, s->workers, inputs);
      require_depth(items, loaded, cfg.variant);
      std::vector<LabeledFeatures> test;
      for (std::size_t i = 0; i < items.size(); ++i) test.push_back({loaded[i].features, truth[i]});
      const Codebook cb = learn_codebook(train, classes, lp);
      const auto pts = codebook_sweep(cb, train, test, grid, lp, cfg, s->workers);
      const fs::path out(s->out);
      auto f = open_out(out / "sweep.csv");
      write_sweep_csv(f, pts);
      write_manifest(out / "manifest.json", "eval sweep", *o, inputs);
      std::cout << pts.size() << " grid points\n";
    };
    cmds.push_back(std::move(c));
  }

  {  // confidence
    struct S {
      std::string model, data, out;
      std::size_t workers = 1;
      int width = 320, height = 240;
      DetectOpts det;
    };
    auto s = std::make_shared<S>();
    Command c;
    c.name = "eval confidence";
    c.app = eval->add_subcommand("confidence", "Fraction of vote weight at the strongest hypothesis, per image");
    c.opts = std::make_unique<Options>(c.app);
    c.opts->add("model", s->model, "model file")->required();
    c.opts->add("data", s->data, "dataset root")->required();
    c.opts->add("out", s->out, "output directory")->required();
    c.opts->add("workers", s->workers, "worker threads");
    s->det.add(*c.opts);
    Options* o = c.opts.get();
    c.run = [s, o] {
      DetectorConfig cfg = s->det.config();
      cfg.segment = false;
      Inputs inputs;
      inputs.add(s->model);
      const Model model = load_model(s->model);
      const auto items = scan_dataset(s->data);
      const auto loaded = load_all(items, model.params.extraction, s->width, s->height, s->workers, inputs);
      require_depth(items, loaded, cfg.variant);
      std::vector<std::optional<double>> conf(items.size());
      parallel_for(items.size(), s->workers, [&](std::size_t i) {
        const auto run = detect_features(loaded[i].features, 0, 0, model, cfg);
        conf[i] = voting_confidence(run.votes, run.hypotheses, cfg.bandwidths, cfg.variant);
      });
      const fs::path out(s->out);
      auto f = open_out(out / "confidence.csv");
      f << "image,confidence\n";
      for (std::size_t i = 0; i < items.size(); ++i) f << items[i].key() << ',' << (conf[i] ? format_double(*conf[i]) : "") << '\n';
      const auto mean = mean_confidence(conf);
      f << "mean," << (mean ? format_double(*mean) : "") << '\n';
      write_manifest(out / "manifest.json", "eval confidence", *o, inputs);
      std::cout << "mean confidence " << (mean ? format_double(*mean) : "n/a") << '\n';
    };
    cmds.push_back(std::move(c));
  }
}

void write_scene(synth::Scene sc, const fs::path& base, bool raster, bool with_depth) {
  fs::create_directories(base.parent_path());
  if (raster) {
    write_intensity(*sc.raster, fs::path(base.string() + ".img"));
    if (with_depth) write_depth(*sc.raster->depth, fs::path(base.string() + ".depth"));
  } else {
    if (!with_depth)
      for (auto& f : sc.features) f.depth.reset();
    write_features(sc.features, fs::path(base.string() + ".feat"));
  }
  BinaryMask m(sc.width, sc.height);
  for (const auto& pm : sc.masks)
    for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] |= pm.pixels[i];
  write_mask(m, fs::path(base.string() + ".mask"));
}

void register_synth(CLI::App& root, std::vector<Command>& cmds) {
  struct S {
    std::string kind = "train", world_kind = "templates", world, scene, out;
    std::size_t count = 10, objects = 2, decoys = 3;
    std::uint64_t seed = 1;
    bool raster = false, no_depth = false;
  };
  auto s = std::make_shared<S>();
  Command c;
  c.name = "synth";
  c.app = root.add_subcommand("synth", "Write a seeded synthetic dataset");
  c.opts = std::make_unique<Options>(c.app);
  c.opts->add("kind", s->kind, "train (count per class), classification, cluttered, rig, or scene")
      ->check(CLI::IsMember({"train", "classification", "cluttered", "rig", "scene"}));
  c.opts->add("world-kind", s->world_kind, "templates or rig")->check(CLI::IsMember({"templates", "rig"}));
  c.opts->add("world", s->world, "JSON world parameters for the templates world");
  c.opts->add("scene", s->scene, "JSON scene description (kind scene)");
  c.opts->add("out", s->out, "output dataset root")->required();
  c.opts->add("count", s->count, "scenes (per class for train)");
  c.opts->add("objects", s->objects, "objects per cluttered scene");
  c.opts->add("decoys", s->decoys, "decoys per cluttered scene");
  c.opts->add("seed", s->seed, "base seed");
  c.opts->flag("raster", s->raster, "write .img/.depth rasters instead of .feat files");
  c.opts->flag("no-depth", s->no_depth, "leave out depth (no .depth files, no feature depths)");
  Options* o = c.opts.get();
  c.run = [s, o] {
    Inputs inputs;
    synth::World w;
    if (s->world_kind == "rig") {
      if (!s->world.empty()) throw UsageError("--world applies to the templates world only");
      w = synth::make_rig_world(synth::RigParams{});
    } else {
      synth::WorldParams wp;
      if (!s->world.empty()) {
        inputs.add(s->world);
        std::ifstream in(s->world);
        try {
          wp = synth::world_params_from_json(json::parse(in));
        } catch (const json::exception& e) {
          throw UsageError(s->world + ": " + e.what());
        } catch (const ConfigError& e) {
          throw UsageError(s->world + ": " + e.what());
        }
      }
      w = synth::make_templates(wp);
    }
    if (s->kind == "rig" && s->world_kind != "rig") throw UsageError("kind rig needs --world-kind rig");
    for (const auto& n : w.class_names) csv_escape_free(n);

    const fs::path out(s->out);
    fs::create_directories(out);
    std::vector<std::pair<std::string, GroundTruthBox>> truth;
    auto emit = [&](synth::SceneSpec spec, std::size_t k) {
      spec.raster = s->raster;
      const auto sc = synth::render_scene(w, spec);
      const std::string cls = spec.placements.empty() ? "empty" : w.class_names[w.templates[spec.placements[0].template_index].class_id];
      char id[32];
      std::snprintf(id, sizeof id, "scene_%04zu", k);
      write_scene(sc, out / cls / id, s->raster, !s->no_depth);
      for (const auto& b : sc.truth) truth.emplace_back(cls + "/" + id, b);
    };
    if (s->kind == "train") {
      for (std::size_t i = 0; i < s->count; ++i)
        for (std::size_t t = 0; t < w.templates.size(); ++t) {
          auto spec = synth::training_spec(w, t, synth::mix_seed(s->seed, i * w.templates.size() + t));
          spec.raster = s->raster;
          const auto sc = synth::render_scene(w, spec);
          char id[32];
          std::snprintf(id, sizeof id, "sample_%04zu", i);
          write_scene(sc, out / w.class_names[w.templates[t].class_id] / id, s->raster, !s->no_depth);
        }
    } else if (s->kind == "scene") {
      if (s->scene.empty()) throw UsageError("kind scene needs --scene");
      inputs.add(s->scene);
      std::ifstream in(s->scene);
      synth::SceneSpec spec;
      try {
        spec = synth::scene_spec_from_json(json::parse(in));
      } catch (const json::exception& e) {
        throw UsageError(s->scene + ": " + e.what());
      } catch (const ConfigError& e) {
        throw UsageError(s->scene + ": " + e.what());
      }
      emit(spec, 0);
    } else {
      for (std::size_t k = 0; k < s->count; ++k) {
        const auto seed = synth::mix_seed(s->seed, k);
        if (s->kind == "classification")
          emit(synth::classification_spec(w, seed, k % w.templates.size()), k);
        else if (s->kind == "cluttered")
          emit(synth::cluttered_spec(w, seed, s->objects, s->decoys), k);
        else
          emit(synth::rig_spec(w, seed), k);
      }
    }
    if (s->kind != "train") {
      auto f = open_out(out / "truth.csv");
      f << "image,class,x0,y0,x1,y1\n";
      for (const auto& [img, b] : truth)
        f << img << ',' << w.class_names[b.class_id] << ',' << format_double(b.x0) << ',' << format_double(b.y0) << ','
          << format_double(b.x1) << ',' << format_double(b.y1) << '\n';
    }
    write_manifest(out / "manifest.json", "synth", *o, inputs);
    std::cout << "wrote " << s->kind << " set to " << out.string() << '\n';
  };
  cmds.push_back(std::move(c));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit shape model detection on RGB-D data"};
  app.set_version_flag("--version", ISM3D_VERSION);
  app.require_subcommand(1);
  std::vector<Command> cmds;
  register_extract(app, cmds);
  register_train(app, cmds);
  register_prune(app, cmds);
  register_detect(app, cmds);
  register_segment(app, cmds);
  register_eval(app, cmds);
  register_synth(app, cmds);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (auto& c : cmds) {
    if (!c.app->parsed()) continue;
    try {
      c.opts->apply_config();
      c.run();
      return 0;
    } catch (const UsageError& e) {
      std::cerr << "ism3d " << c.name << ": " << e.what() << '\n';
      return 2;
    } catch (const ConfigError& e) {
      std::cerr << "ism3d " << c.name << ": " << e.what() << '\n';
      return 2;
    } catch (const std::exception& e) {
      std::cerr << "ism3d " << c.name << ": " << e.what() << '\n';
      return 1;
    }
  }
  return 2;
}
