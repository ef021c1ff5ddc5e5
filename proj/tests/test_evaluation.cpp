#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "ism3d/evaluation.hpp"
#include "ism3d/synthgen.hpp"

using namespace ism3d;

namespace {

GroundTruthBox box(std::size_t cls, double x0, double y0, double x1, double y1) { return {cls, x0, y0, x1, y1, std::nullopt}; }

ScoredDetection det(std::size_t cls, double score, double ratio, double x, double y) { return {cls, score, ratio, x, y}; }

}  // namespace

TEST(Confusion, Example) {
  const std::vector<std::string> pred{"a", "b", "b", "b"}, truth{"a", "a", "b", "b"};
  const auto m = confusion(std::span<const std::string>(pred), std::span<const std::string>(truth), {"a", "b"});
  EXPECT_EQ(m.at(0, 0), 1u);
  EXPECT_EQ(m.at(0, 1), 1u);
  EXPECT_EQ(m.at(1, 1), 2u);
  EXPECT_DOUBLE_EQ(m.accuracy(), 0.75);
  std::ostringstream s;
  write_confusion_csv(s, m);
  EXPECT_EQ(s.str(), "true\\pred,a,b,abstain\na,1,1,0\nb,0,2,0\naccuracy,0.75\n");
}

TEST(Confusion, AbstentionCountsAgainstAccuracy) {
  const std::vector<std::optional<std::size_t>> pred{0, std::nullopt};
  const std::vector<std::size_t> truth{0, 1};
  const auto m = confusion(pred, truth, {"a", "b"});
  EXPECT_DOUBLE_EQ(m.accuracy(), 0.5);
  EXPECT_EQ(m.abstained[1], 1u);
}

TEST(Confusion, Errors) {
  const std::vector<std::optional<std::size_t>> none;
  const std::vector<std::size_t> no_truth;
  EXPECT_THROW(confusion(none, no_truth, {"a"}), Error);
  const std::vector<std::string> p{"a"}, t{"c"};
  EXPECT_THROW(confusion(std::span<const std::string>(p), std::span<const std::string>(t), {"a", "b"}), Error);
  const std::vector<std::optional<std::size_t>> p2{0, 1};
  const std::vector<std::size_t> t2{0};
  EXPECT_THROW(confusion(p2, t2, {"a", "b"}), Error);
}

TEST(Confusion, AccuracyInvariantUnderLabelPermutation) {
  std::mt19937_64 rng(4);
  std::vector<std::optional<std::size_t>> p;
  std::vector<std::size_t> t;
  for (int i = 0; i < 200; ++i) {
    t.push_back(rng() % 4);
    p.push_back(rng() % 5 == 4 ? std::nullopt : std::optional<std::size_t>(rng() % 4));
  }
  const double a = confusion(p, t, {"a", "b", "c", "d"}).accuracy();
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  for (auto& x : t) x = perm[x];
  for (auto& x : p)
    if (x) x = perm[*x];
  EXPECT_DOUBLE_EQ(confusion(p, t, {"a", "b", "c", "d"}).accuracy(), a);
}

TEST(PR, PerfectDetections) {
  const std::vector<std::vector<ScoredDetection>> d{{det(0, 2, 1, 10, 10)}, {det(1, 1, 1, 50, 50)}};
  const std::vector<std::vector<GroundTruthBox>> t{{box(0, 0, 0, 20, 20)}, {box(1, 40, 40, 60, 60)}};
  const std::vector<double> grid{0.5};
  const auto c = pr_curve(d, t, grid);
  EXPECT_DOUBLE_EQ(c.points[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(c.points[0].recall, 1.0);
}

TEST(PR, OneTrueOneFalse) {
  // Second detection is the wrong class for the box it sits in.
  const std::vector<std::vector<ScoredDetection>> d{{det(0, 2, 1, 10, 10), det(1, 1, 0.5, 12, 12)}};
  const std::vector<std::vector<GroundTruthBox>> t{{box(0, 0, 0, 20, 20), box(1, 100, 100, 120, 120)}};
  const std::vector<double> grid{0.4, 0.6};
  const auto c = pr_curve(d, t, grid);
  EXPECT_DOUBLE_EQ(c.points[0].precision, 0.5);
  EXPECT_DOUBLE_EQ(c.points[0].recall, 0.5);
  EXPECT_EQ(c.points[0].false_positives, 1u);
  EXPECT_DOUBLE_EQ(c.points[1].precision, 1.0);
  EXPECT_DOUBLE_EQ(c.points[1].recall, 0.5);
}

TEST(PR, DuplicateDetectionIsFalsePositive) {
  const std::vector<ScoredDetection> d{det(0, 2, 1, 10, 10), det(0, 1.5, 0.75, 11, 11)};
  const std::vector<GroundTruthBox> t{box(0, 0, 0, 20, 20)};
  std::size_t kept = 0;
  EXPECT_EQ(count_true_positives(d, t, 0.5, &kept), 1u);
  EXPECT_EQ(kept, 2u);
}

TEST(PR, NothingRetainedHasPrecisionOne) {
  const std::vector<std::vector<ScoredDetection>> d{{}};
  const std::vector<std::vector<GroundTruthBox>> t{{box(0, 0, 0, 1, 1)}};
  const std::vector<double> grid{0.5};
  const auto c = pr_curve(d, t, grid);
  EXPECT_DOUBLE_EQ(c.points[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(c.points[0].recall, 0.0);
}

TEST(PR, ImageCountMismatchThrows) {
  const std::vector<std::vector<ScoredDetection>> d(2);
  const std::vector<std::vector<GroundTruthBox>> t(1);
  EXPECT_THROW(pr_curve(d, t, std::vector<double>{0.5}), Error);
}

TEST(PR, AucExamples) {
  PRCurve c;
  c.points = {{0, 1.0, 1.0}};
  EXPECT_DOUBLE_EQ(c.auc(), 1.0);
  c.points = {{0, 1.0, 0.5}, {0, 0.5, 1.0}};
  EXPECT_DOUBLE_EQ(c.auc(), 0.5 + 0.375);
  EXPECT_EQ(PRCurve{}.auc(), 0.0);
}

// On scenes whose boxes do not overlap, greedy matching reduces to counting
// boxes that hold at least one retained same-class detection.
TEST(PR, MatchesBoxCountingOnSyntheticScenes) {
  synth::WorldParams wp;
  wp.n_classes = 3;
  wp.seed = 61;
  const auto world = synth::make_templates(wp);
  const Model model = learn(synth::make_training_set(world, 6, 62), world.class_names, LearnParams{});
  std::vector<FeatureSet> images;
  std::vector<std::vector<GroundTruthBox>> truth;
  for (std::uint64_t s = 0; s < 32; ++s) {
    const auto sc = synth::render_scene(world, synth::cluttered_spec(world, 700 + s, 2 + s % 2, 2));
    images.push_back(sc.features);
    truth.push_back(sc.truth);
  }
  DetectorConfig cfg;
  cfg.segment = false;
  const auto runs = detect_batch(images, 320, 240, model, cfg);
  std::vector<std::vector<ScoredDetection>> dets;
  for (const auto& r : runs) dets.push_back(scored_hypotheses(r));
  const auto grid = linear_grid(0.05, 1.0, 20);
  const auto curve = pr_curve(dets, truth, grid);

  std::size_t n_truth = 0;
  for (const auto& t : truth) n_truth += t.size();
  for (std::size_t g = 0; g < grid.size(); ++g) {
    std::size_t tp = 0, kept = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      for (const auto& d : dets[i]) kept += d.ratio >= grid[g];
      for (const auto& b : truth[i]) {
        bool hit = false;
        for (const auto& d : dets[i]) hit = hit || (d.ratio >= grid[g] && d.class_id == b.class_id && b.contains(d.x, d.y));
        tp += hit;
      }
    }
    const auto& p = curve.points[g];
    EXPECT_EQ(p.true_positives, tp) << grid[g];
    EXPECT_EQ(p.true_positives + p.false_positives, kept) << grid[g];
    EXPECT_DOUBLE_EQ(p.recall, static_cast<double>(tp) / static_cast<double>(n_truth));
    if (g > 0) EXPECT_LE(p.recall, curve.points[g - 1].recall);
  }
  EXPECT_GT(curve.points.front().recall, 0.9);

  // Same results with several workers.
  const auto runs4 = detect_batch(images, 320, 240, model, cfg, 4);
  for (std::size_t i = 0; i < runs.size(); ++i) EXPECT_EQ(runs4[i].hypotheses.size(), runs[i].hypotheses.size());
}

TEST(Sweep, ZeroThresholdKeepsCodebookAndSizesShrink) {
  synth::WorldParams wp;
  wp.n_classes = 2;
  wp.seed = 81;
  const auto world = synth::make_templates(wp);
  const auto samples = synth::make_training_set(world, 5, 82);
  LearnParams lp;
  const Codebook cb = learn_codebook(samples, world.class_names, lp);
  std::vector<LabeledFeatures> test;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::uint64_t k = 0; k < 5; ++k)
      test.push_back({synth::render_scene(world, synth::classification_spec(world, 90 + 10 * c + k, c)).features, c});
  const std::vector<double> grid{0.0, 0.01, 0.05, 0.2, 1.0};
  const auto pts = codebook_sweep(cb, samples, test, grid, lp, DetectorConfig{});
  ASSERT_EQ(pts.size(), grid.size());
  EXPECT_EQ(pts[0].size, cb.size());
  const Model full = train(samples, cb, lp);
  EXPECT_DOUBLE_EQ(pts[0].accuracy, evaluate_classification(test, full, DetectorConfig{}).accuracy());
  for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LE(pts[i].size, pts[i - 1].size);
  std::ostringstream s;
  write_sweep_csv(s, pts);
  EXPECT_EQ(s.str().substr(0, 21), "t_ig,size,accuracy\n0,");
}

TEST(Confidence, MeanIgnoresUndefined) {
  const std::vector<std::optional<double>> c{0.5, std::nullopt, 1.0};
  EXPECT_DOUBLE_EQ(*mean_confidence(c), 0.75);
  const std::vector<std::optional<double>> none{std::nullopt};
  EXPECT_FALSE(mean_confidence(none).has_value());
}

TEST(Grid, Linear) {
  const auto g = linear_grid(0.0, 1.0, 5);
  EXPECT_EQ(g, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  EXPECT_EQ(linear_grid(0.3, 0.9, 1), (std::vector<double>{0.3}));
}
