#include <gtest/gtest.h>

#include "ism3d/detector.hpp"
#include "ism3d/synthgen.hpp"

using namespace ism3d;

namespace {

struct Fixture {
  synth::World world;
  Model model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    synth::WorldParams wp;
    wp.n_classes = 3;
    wp.seed = 21;
    Fixture x{synth::make_templates(wp), {}};
    x.model = learn(synth::make_training_set(x.world, 6, 22), x.world.class_names, LearnParams{});
    return x;
  }();
  return f;
}

synth::Scene single_object(std::size_t cls, std::uint64_t seed, double clutter_scale = 0.0) {
  const auto& w = fixture().world;
  synth::SceneSpec s;
  s.seed = seed;
  s.placements = {{cls, 150, 110, 1.1, 1.8}};
  s.clutter = static_cast<std::size_t>(30 * clutter_scale);
  s.random_clutter = static_cast<std::size_t>(10 * clutter_scale);
  s.clutter_outside_objects = true;
  return synth::render_scene(w, s);
}

}  // namespace

TEST(FilterByRatio, Examples) {
  const std::vector<double> s{1.0, 0.6, 0.5};
  EXPECT_EQ(filter_by_ratio(s, 0.55), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(filter_by_ratio(s, 1.0), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(filter_by_ratio({}, 0.5).empty());
}

TEST(FilterByRatio, StrongestAlwaysKeptAndMonotone) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.001, 5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1 + rng() % 20);
    for (auto& x : s) x = u(rng);
    const auto top = static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
    std::size_t prev = s.size() + 1;
    for (double t = 0.05; t <= 1.0; t += 0.05) {
      const auto k = filter_by_ratio(s, t);
      EXPECT_NE(std::find(k.begin(), k.end(), top), k.end());
      EXPECT_LE(k.size(), prev);
      prev = k.size();
    }
  }
}

TEST(Detect, NoFeaturesNoDetections) {
  const auto run = detect_features({}, 100, 100, fixture().model, DetectorConfig{});
  EXPECT_TRUE(run.detections.empty());
  EXPECT_TRUE(run.votes.empty());
}

TEST(Detect, DepthVariantWithoutDepthIsConfigError) {
  FeatureSet fs = single_object(0, 1).features;
  for (auto& f : fs) f.depth.reset();
  DetectorConfig c;
  c.variant = Variant::JI3SM2;
  EXPECT_THROW(detect_features(fs, 320, 240, fixture().model, c), ConfigError);
  c.variant = Variant::JISM;
  EXPECT_NO_THROW(detect_features(fs, 320, 240, fixture().model, c));

  ImageRGBD img(16, 16, 0.5f);
  c.variant = Variant::JI3SM3;
  EXPECT_THROW(detect(img, fixture().model, c), ConfigError);
  EXPECT_THROW(classify_image(img, fixture().model, c), ConfigError);
}

TEST(Detect, InvalidConfig) {
  DetectorConfig c;
  c.t_ratio = 0.0;
  EXPECT_THROW(detect_features(single_object(0, 1).features, 320, 240, fixture().model, c), ConfigError);
  c = {};
  c.bandwidths.d = -1;
  EXPECT_THROW(detect_features(single_object(0, 1).features, 320, 240, fixture().model, c), ConfigError);
}

TEST(Detect, RecoversSingleObjectWithEveryVariant) {
  for (std::size_t cls = 0; cls < 3; ++cls) {
    const auto sc = single_object(cls, 100 + cls, 1.0);
    for (auto v : kAllVariants) {
      DetectorConfig c;
      c.variant = v;
      const auto run = detect_features(sc.features, sc.width, sc.height, fixture().model, c);
      ASSERT_FALSE(run.detections.empty()) << to_string(v);
      const auto& d = run.detections.front();
      EXPECT_EQ(d.class_id, cls) << to_string(v);
      EXPECT_NEAR(d.x, 150, c.bandwidths.xy) << to_string(v);
      EXPECT_NEAR(d.y, 110, c.bandwidths.xy) << to_string(v);
      EXPECT_EQ(d.ratio, 1.0);
      EXPECT_GT(d.score, 0.0);
      EXPECT_LE(d.score, 1.0);
      if (uses_depth(v)) {
        ASSERT_TRUE(d.depth.has_value());
        EXPECT_NEAR(*d.depth, 1.8, 0.1);
      }
      ASSERT_TRUE(d.segmentation.has_value());
      // Most of the segmentation lies on the object.
      const auto& m = d.segmentation->mask;
      std::size_t on = 0;
      for (std::size_t i = 0; i < m.pixels.size(); ++i) on += m.pixels[i] && sc.masks[0].pixels[i];
      EXPECT_GT(m.count(), 0u);
      EXPECT_GE(static_cast<double>(on), 0.8 * static_cast<double>(m.count())) << to_string(v);
    }
  }
}

TEST(Detect, RatioThresholdIsMonotone) {
  const auto& w = fixture().world;
  auto spec = synth::cluttered_spec(w, 9, 2, 2);
  const auto sc = synth::render_scene(w, spec);
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (double t : {0.1, 0.3, 0.55, 0.8, 1.0}) {
    DetectorConfig c;
    c.t_ratio = t;
    c.segment = false;
    const auto run = detect_features(sc.features, sc.width, sc.height, fixture().model, c);
    EXPECT_GE(run.detections.size(), 1u);
    EXPECT_LE(run.detections.size(), prev);
    prev = run.detections.size();
    for (const auto& d : run.detections) EXPECT_GE(d.ratio, t);
  }
}

TEST(Detect, MaxDetections) {
  const auto& w = fixture().world;
  const auto sc = synth::render_scene(w, synth::cluttered_spec(w, 9, 2, 2));
  DetectorConfig c;
  c.t_ratio = 0.05;
  c.max_detections = 1;
  EXPECT_EQ(detect_features(sc.features, sc.width, sc.height, fixture().model, c).detections.size(), 1u);
}

TEST(Classify, PlantedClassWins) {
  for (std::size_t cls = 0; cls < 3; ++cls)
    for (auto v : kAllVariants) {
      DetectorConfig c;
      c.variant = v;
      EXPECT_EQ(classify_features(single_object(cls, 40 + cls).features, fixture().model, c), cls) << to_string(v);
    }
}

TEST(Classify, AbstainsWithoutVotes) {
  // t_match = 1 with a one-hot descriptor: no centroid is exactly parallel.
  FeatureSet fs;
  Descriptor d(fixture().model.codebook.descriptor_dim, 0.0);
  d[0] = 1.0;
  fs.push_back({10, 10, 1, 1.0, d});
  DetectorConfig c;
  c.t_match = 1.0;
  EXPECT_FALSE(classify_features(fs, fixture().model, c).has_value());
  EXPECT_FALSE(classify_features({}, fixture().model, c).has_value());
}

TEST(Classify, ArgmaxOfHypotheses) {
  const auto sc = single_object(2, 77, 1.0);
  DetectorConfig c;
  c.variant = Variant::JISM;
  c.segment = false;
  c.t_ratio = 1.0;
  const auto run = detect_features(sc.features, sc.width, sc.height, fixture().model, c);
  ASSERT_FALSE(run.hypotheses.empty());
  std::size_t best = 0;
  for (std::size_t i = 1; i < run.hypotheses.size(); ++i)
    if (run.hypotheses[i].score > run.hypotheses[best].score) best = i;
  EXPECT_EQ(classify_features(sc.features, fixture().model, c), run.hypothesis_classes[best]);
}

TEST(Detect, RasterPipeline) {
  synth::WorldParams wp;
  wp.n_classes = 2;
  wp.seed = 31;
  const auto world = synth::make_templates(wp);
  std::vector<TrainingSample> train;
  for (std::size_t cls = 0; cls < 2; ++cls)
    for (std::uint64_t k = 0; k < 4; ++k) {
      auto spec = synth::training_spec(world, cls, 500 + 10 * cls + k);
      spec.raster = true;
      auto sc = synth::render_scene(world, spec);
      train.push_back({std::move(*sc.raster), cls, sc.masks[0]});
    }
  LearnParams lp;
  const auto samples = extract_samples(train, lp.extraction);
  for (const auto& s : samples) ASSERT_FALSE(s.features.empty());
  const Model m = learn(samples, world.class_names, lp);
  EXPECT_GT(m.codebook.size(), 0u);
  EXPECT_GT(m.occurrences.size(), 0u);

  synth::SceneSpec test;
  test.seed = 900;
  test.raster = true;
  test.placements = {{1, 160, 120, 1.0, 1.5}};
  const auto sc = synth::render_scene(world, test);
  for (auto v : {Variant::ISM, Variant::JI3SM3}) {
    DetectorConfig c;
    c.variant = v;
    const auto dets = detect(*sc.raster, m, c);
    ASSERT_FALSE(dets.empty()) << to_string(v);
    EXPECT_TRUE(sc.truth[0].contains(dets.front().x, dets.front().y)) << to_string(v);
    EXPECT_EQ(dets.front().class_id, 1u) << to_string(v);
  }
}
