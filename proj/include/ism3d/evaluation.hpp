#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ism3d/codebook.hpp"
#include "ism3d/detector.hpp"
#include "ism3d/model.hpp"
#include "ism3d/parallel.hpp"

namespace ism3d {

// Rows = true class, columns = predicted class. Abstentions count toward the
// total but never toward the diagonal.
struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<std::size_t> counts;  // n x n, row-major
  std::vector<std::size_t> abstained;  // per true class
  std::size_t total = 0;

  std::size_t n() const { return classes.size(); }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * n() + pred]; }
  std::size_t correct() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < n(); ++i) t += at(i, i);
    return t;
  }
  double accuracy() const { return total ? static_cast<double>(correct()) / static_cast<double>(total) : 0.0; }
};

inline ConfusionMatrix confusion(std::span<const std::optional<std::size_t>> predictions, std::span<const std::size_t> truths,
                                 std::vector<std::string> classes) {
  if (predictions.size() != truths.size()) throw Error("confusion: predictions and truths differ in length");
  if (truths.empty()) throw Error("confusion: no evaluated images");
  ConfusionMatrix m;
  m.classes = std::move(classes);
  const std::size_t n = m.n();
  m.counts.assign(n * n, 0);
  m.abstained.assign(n, 0);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] >= n) throw Error("confusion: true label outside class list");
    if (predictions[i]) {
      if (*predictions[i] >= n) throw Error("confusion: predicted label outside class list");
      ++m.counts[truths[i] * n + *predictions[i]];
    } else {
      ++m.abstained[truths[i]];
    }
    ++m.total;
  }
  return m;
}

// Label-string convenience overload; an empty prediction string abstains.
inline ConfusionMatrix confusion(std::span<const std::string> predictions, std::span<const std::string> truths,
                                 std::vector<std::string> classes) {
  auto index = [&](const std::string& s) -> std::size_t {
    auto it = std::find(classes.begin(), classes.end(), s);
    if (it == classes.end()) throw Error("confusion: label '" + s + "' outside class list");
    return static_cast<std::size_t>(it - classes.begin());
  };
  std::vector<std::optional<std::size_t>> p;
  std::vector<std::size_t> t;
  for (const auto& s : predictions) p.push_back(s.empty() ? std::nullopt : std::optional<std::size_t>(index(s)));
  for (const auto& s : truths) t.push_back(index(s));
  return confusion(p, t, std::move(classes));
}

inline void write_confusion_csv(std::ostream& out, const ConfusionMatrix& m) {
  out << "true\\pred";
  for (const auto& c : m.classes) out << ',' << c;
  out << ",abstain\n";
  for (std::size_t i = 0; i < m.n(); ++i) {
    out << m.classes[i];
    for (std::size_t j = 0; j < m.n(); ++j) out << ',' << m.at(i, j);
    out << ',' << m.abstained[i] << '\n';
  }
  out << "accuracy," << format_double(m.accuracy()) << '\n';
}

struct GroundTruthBox {
  std::size_t class_id = 0;
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::optional<double> depth;

  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

// A hypothesis reduced to what PR evaluation needs. ratio = score / strongest
// score of its image.
struct ScoredDetection {
  std::size_t class_id = 0;
  double score = 0.0;
  double ratio = 0.0;
  double x = 0.0;
  double y = 0.0;
};

struct PRPoint {
  double t_ratio = 0.0;
  double precision = 1.0;
  double recall = 0.0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t n_truth = 0;
};

struct PRCurve {
  std::vector<PRPoint> points;

  // Trapezoidal area under precision(recall), points ordered by recall. The
  // curve is extended to recall 0 at the precision of its lowest-recall point,
  // so curves reaching different recall ranges are comparable.
  double auc() const {
    auto pts = points;
    if (pts.empty()) return 0.0;
    std::sort(pts.begin(), pts.end(), [](const PRPoint& a, const PRPoint& b) {
      if (a.recall != b.recall) return a.recall < b.recall;
      return a.precision > b.precision;
    });
    if (pts.front().recall > 0.0) {
      PRPoint anchor = pts.front();
      anchor.recall = 0.0;
      pts.insert(pts.begin(), anchor);
    }
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i)
      area += (pts[i].recall - pts[i - 1].recall) * 0.5 * (pts[i].precision + pts[i - 1].precision);
    return area;
  }
};

// Number of true positives among detections with ratio >= t: greedy by score,
// a detection matches the nearest unmatched same-class box containing its
// center.
inline std::size_t count_true_positives(std::span<const ScoredDetection> dets, std::span<const GroundTruthBox> truth,
                                        double t, std::size_t* kept = nullptr) {
  std::vector<const ScoredDetection*> sel;
  for (const auto& d : dets)
    if (d.ratio >= t) sel.push_back(&d);
  std::stable_sort(sel.begin(), sel.end(), [](const ScoredDetection* a, const ScoredDetection* b) {
    if (a->score != b->score) return a->score > b->score;
    if (a->x != b->x) return a->x < b->x;
    return a->y < b->y;
  });
  std::vector<bool> used(truth.size(), false);
  std::size_t tp = 0;
  for (const auto* d : sel) {
    std::size_t best = truth.size();
    double best_d = 0.0;
    for (std::size_t g = 0; g < truth.size(); ++g) {
      const auto& b = truth[g];
      if (used[g] || b.class_id != d->class_id || !b.contains(d->x, d->y)) continue;
      const double cx = 0.5 * (b.x0 + b.x1), cy = 0.5 * (b.y0 + b.y1);
      const double dist = std::hypot(d->x - cx, d->y - cy);
      if (best == truth.size() || dist < best_d) {
        best = g;
        best_d = dist;
      }
    }
    if (best < truth.size()) {
      used[best] = true;
      ++tp;
    }
  }
  if (kept) *kept = sel.size();
  return tp;
}

// Pooled over images and classes. Precision is 1 when nothing is retained.
inline PRCurve pr_curve(std::span<const std::vector<ScoredDetection>> detections,
                        std::span<const std::vector<GroundTruthBox>> truth, std::span<const double> grid) {
  if (detections.size() != truth.size()) throw Error("pr_curve: detections and ground truth differ in image count");
  PRCurve curve;
  std::size_t n_truth = 0;
  for (const auto& t : truth) n_truth += t.size();
  for (double t : grid) {
    PRPoint p;
    p.t_ratio = t;
    p.n_truth = n_truth;
    std::size_t kept_total = 0;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      std::size_t kept = 0;
      p.true_positives += count_true_positives(detections[i], truth[i], t, &kept);
      kept_total += kept;
    }
    p.false_positives = kept_total - p.true_positives;
    p.precision = kept_total ? static_cast<double>(p.true_positives) / static_cast<double>(kept_total) : 1.0;
    p.recall = n_truth ? static_cast<double>(p.true_positives) / static_cast<double>(n_truth) : 0.0;
    curve.points.push_back(p);
  }
  return curve;
}

inline void write_pr_csv(std::ostream& out, const PRCurve& c) {
  out << "t_ratio,precision,recall\n";
  for (const auto& p : c.points)
    out << format_double(p.t_ratio) << ',' << format_double(p.precision) << ',' << format_double(p.recall) << '\n';
}

// Every hypothesis of a detection run as a scored detection.
inline std::vector<ScoredDetection> scored_hypotheses(const DetectionRun& run) {
  std::vector<ScoredDetection> out;
  if (run.hypotheses.empty()) return out;
  double top = 0.0;
  for (const auto& h : run.hypotheses) top = std::max(top, h.score);
  for (std::size_t i = 0; i < run.hypotheses.size(); ++i) {
    const auto& h = run.hypotheses[i];
    out.push_back({run.hypothesis_classes[i], h.score, h.score / top, h.coords[0], h.coords[1]});
  }
  return out;
}

// One detection run per feature set; results in input order whatever the
// worker count.
inline std::vector<DetectionRun> detect_batch(std::span<const FeatureSet> images, int width, int height, const Model& model,
                                              const DetectorConfig& config, std::size_t workers = 1) {
  std::vector<DetectionRun> runs(images.size());
  parallel_for(images.size(), workers, [&](std::size_t i) { runs[i] = detect_features(images[i], width, height, model, config); });
  return runs;
}

// Evenly spaced grid lo, lo+step, ..., hi (inclusive).
inline std::vector<double> linear_grid(double lo, double hi, std::size_t points) {
  std::vector<double> g;
  if (points == 1) return {lo};
  for (std::size_t i = 0; i < points; ++i) g.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1));
  return g;
}

struct LabeledFeatures {
  FeatureSet features;
  std::size_t class_id = 0;
};

inline ConfusionMatrix evaluate_classification(std::span<const LabeledFeatures> test, const Model& model,
                                               const DetectorConfig& config, std::size_t workers = 1) {
  std::vector<std::optional<std::size_t>> pred(test.size());
  parallel_for(test.size(), workers, [&](std::size_t i) { pred[i] = classify_features(test[i].features, model, config); });
  std::vector<std::size_t> truth;
  for (const auto& t : test) truth.push_back(t.class_id);
  return confusion(pred, truth, model.class_names());
}

struct SweepPoint {
  double t_ig = 0.0;
  std::size_t size = 0;
  double accuracy = 0.0;
};

// Prunes `base` (gains already stored) at each threshold, retrains the
// occurrences and re-evaluates classification.
inline std::vector<SweepPoint> codebook_sweep(const Codebook& base, std::span<const FeatureSample> train_set,
                                              std::span<const LabeledFeatures> test_set, std::span<const double> grid,
                                              const LearnParams& params, const DetectorConfig& config,
                                              std::size_t workers = 1) {
  std::vector<SweepPoint> out;
  for (double t : grid) {
    const auto pruned = prune_by_stored_gain(base, t);
    const Model m = train(train_set, pruned.codebook, params);
    out.push_back({t, pruned.size_after, evaluate_classification(test_set, m, config, workers).accuracy()});
  }
  return out;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> pts) {
  out << "t_ig,size,accuracy\n";
  for (const auto& p : pts) out << format_double(p.t_ig) << ',' << p.size << ',' << format_double(p.accuracy) << '\n';
}

// Mean over images with a defined confidence.
inline std::optional<double> mean_confidence(std::span<const std::optional<double>> per_image) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& c : per_image)
    if (c) {
      s += *c;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

}  // namespace ism3d
