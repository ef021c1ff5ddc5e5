#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ism3d/features.hpp"
#include "ism3d/model.hpp"
#include "ism3d/segmentation.hpp"
#include "ism3d/voting.hpp"

namespace ism3d {

struct DetectorConfig {
  Variant variant = Variant::JI3SM3;
  Bandwidths bandwidths;
  double t_match = 0.7;
  double t_ratio = 0.55;
  std::size_t max_detections = 0;  // 0 = unlimited
  bool segment = true;
  MeanShiftParams mean_shift;

  void validate() const {
    bandwidths.validate();
    if (!(t_ratio > 0.0 && t_ratio <= 1.0)) throw ConfigError("t_ratio must lie in (0, 1]");
    if (!(t_match >= -1.0 && t_match <= 1.0)) throw ConfigError("t_match must lie in [-1, 1]");
  }
};

struct Detection {
  Hypothesis hypothesis;
  std::size_t hypothesis_index = 0;
  std::size_t class_id = 0;
  std::string class_name;
  double score = 0.0;  // hypothesis weight / total cast weight of the image
  double ratio = 0.0;  // score / strongest score of the image
  double x = 0.0;
  double y = 0.0;
  std::optional<double> coord3;  // scale, depth or depth*scale, per variant
  std::optional<double> depth;   // weighted mean d_f of supporting votes
  std::optional<SegmentationResult> segmentation;
};

// Everything a detection run produced, for metrics and debugging.
struct DetectionRun {
  std::vector<Vote> votes;
  std::vector<Hypothesis> hypotheses;
  std::vector<std::size_t> hypothesis_classes;
  std::vector<Detection> detections;
  double total_weight = 0.0;
};

// Indices of scores >= t_ratio * max(scores).
inline std::vector<std::size_t> filter_by_ratio(std::span<const double> scores, double t_ratio) {
  std::vector<std::size_t> keep;
  if (scores.empty()) return keep;
  const double top = *std::max_element(scores.begin(), scores.end());
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] >= t_ratio * top) keep.push_back(i);
  return keep;
}

inline DetectionRun detect_features(const FeatureSet& features, int width, int height, const Model& model,
                                    const DetectorConfig& config) {
  config.validate();
  DetectionRun run;
  if (features.empty()) return run;
  if (uses_depth(config.variant) &&
      std::none_of(features.begin(), features.end(), [](const Feature& f) { return f.depth.has_value(); }))
    throw ConfigError("variant " + std::string(to_string(config.variant)) + " needs feature depths (no depth map given)");

  const auto acts = match_all(model.codebook, features, config.t_match);
  run.votes = cast_votes(features, acts, model, config.variant);
  for (const Vote& v : run.votes) run.total_weight += v.weight;
  run.hypotheses = mean_shift(run.votes, config.bandwidths, config.variant, config.mean_shift);
  for (const auto& h : run.hypotheses)
    run.hypothesis_classes.push_back(h.class_id ? *h.class_id : majority_class(h, run.votes, model));
  if (run.hypotheses.empty()) return run;

  std::vector<double> scores;
  for (const auto& h : run.hypotheses) scores.push_back(h.score);
  const double top = *std::max_element(scores.begin(), scores.end());
  for (std::size_t hi : filter_by_ratio(scores, config.t_ratio)) {
    const Hypothesis& h = run.hypotheses[hi];
    Detection d;
    d.hypothesis = h;
    d.hypothesis_index = hi;
    d.class_id = run.hypothesis_classes[hi];
    if (d.class_id < model.class_names().size()) d.class_name = model.class_names()[d.class_id];
    d.score = h.score / run.total_weight;
    d.ratio = h.score / top;
    d.x = h.coords[0];
    d.y = h.coords[1];
    d.coord3 = h.coords[2];
    if (uses_depth(config.variant)) {
      double wd = 0.0, ws = 0.0;
      for (std::size_t vi : h.support) {
        const auto& f = features[run.votes[vi].feature];
        if (!f.depth) continue;
        wd += run.votes[vi].weight * *f.depth;
        ws += run.votes[vi].weight;
      }
      if (ws > 0) d.depth = wd / ws;
    }
    run.detections.push_back(std::move(d));
    if (config.max_detections && run.detections.size() >= config.max_detections) break;
  }
  if (config.segment && width > 0 && height > 0)
    for (auto& d : run.detections)
      d.segmentation = segment_hypothesis(d.hypothesis, d.hypothesis_index, run.votes, features, model, width, height);
  return run;
}

inline FeatureSet image_features(const ImageRGBD& image, const Model& model) {
  FeatureSet fs = extract_features(image, model.params.extraction);
  if (image.depth) fs = attach_depth(std::move(fs), *image.depth);
  return fs;
}

inline std::vector<Detection> detect(const ImageRGBD& image, const Model& model, const DetectorConfig& config) {
  if (uses_depth(config.variant) && !image.depth)
    throw ConfigError("variant " + std::string(to_string(config.variant)) + " needs a depth map");
  return detect_features(image_features(image, model), image.width, image.height, model, config).detections;
}

// Class of the globally strongest hypothesis; std::nullopt (abstain) when no
// votes were cast.
inline std::optional<std::size_t> classify_features(const FeatureSet& features, const Model& model, DetectorConfig config) {
  config.segment = false;
  config.t_ratio = 1.0;
  if (uses_depth(config.variant) &&
      std::none_of(features.begin(), features.end(), [](const Feature& f) { return f.depth.has_value(); }))
    return std::nullopt;
  const auto run = detect_features(features, 0, 0, model, config);
  if (run.hypotheses.empty()) return std::nullopt;
  return run.hypothesis_classes.front();
}

inline std::optional<std::size_t> classify_image(const ImageRGBD& image, const Model& model, const DetectorConfig& config) {
  if (uses_depth(config.variant) && !image.depth)
    throw ConfigError("variant " + std::string(to_string(config.variant)) + " needs a depth map");
  return classify_features(image_features(image, model), model, config);
}

}  // namespace ism3d
