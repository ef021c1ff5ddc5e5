#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "ism3d/voting.hpp"

using namespace ism3d;

namespace {

// Model with one-hot words; occurrences given as (word, class, x, y, scale).
struct Occ {
  std::size_t word, cls;
  double x, y, s;
};

Model make_model(std::size_t n_words, std::size_t n_classes, std::vector<Occ> occs) {
  Model m;
  m.codebook.descriptor_dim = n_words;
  for (std::size_t i = 0; i < n_words; ++i) {
    Descriptor c(n_words, 0.0);
    c[i] = 1.0;
    m.codebook.words.push_back({i, c, 1, std::vector<std::size_t>(n_classes, 0), 0.0});
  }
  for (std::size_t c = 0; c < n_classes; ++c) m.codebook.class_names.push_back("c" + std::to_string(c));
  for (const auto& o : occs) m.occurrences.push_back({o.word, o.cls, o.x, o.y, o.s, {}});
  std::sort(m.occurrences.begin(), m.occurrences.end(), occurrence_less);
  return m;
}

Vote vote_at(double x, double y, double s, double w, std::optional<std::size_t> cls = std::nullopt) {
  Vote v;
  v.coords = {x, y, s, 0.0};
  v.weight = w;
  v.class_id = cls;
  return v;
}

}  // namespace

TEST(VoteCoords, Projection) {
  const Feature f{80, 60, 2.0, 1.5, {}};
  const Occurrence o{0, 0, 10, -4, 1.0, {}};
  const auto ism = vote_coords(f, o, Variant::ISM);
  EXPECT_DOUBLE_EQ(ism[0], 60.0);
  EXPECT_DOUBLE_EQ(ism[1], 68.0);
  EXPECT_DOUBLE_EQ(ism[2], 2.0);
  const auto j2 = vote_coords(f, o, Variant::JI3SM2);
  EXPECT_DOUBLE_EQ(j2[0], 60.0);
  EXPECT_DOUBLE_EQ(j2[1], 68.0);
  EXPECT_DOUBLE_EQ(j2[2], 1.5);
  const auto j1 = vote_coords(f, o, Variant::JI3SM1);
  EXPECT_DOUBLE_EQ(j1[2], 2.0);
  EXPECT_DOUBLE_EQ(j1[3], 1.5);
  EXPECT_DOUBLE_EQ(vote_coords(f, o, Variant::JI3SM3)[2], 3.0);
}

TEST(VoteCoords, InvertsTraining) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-50, 50), s(0.5, 3);
  for (int i = 0; i < 200; ++i) {
    const double cx = u(rng), cy = u(rng), si = s(rng), r = s(rng);
    const Occurrence o{0, 0, u(rng), u(rng), si, {}};
    // The same part seen at scale r relative to training.
    const Feature f{cx + o.x * r, cy + o.y * r, si * r, std::nullopt, {}};
    const auto c = vote_coords(f, o, Variant::ISM);
    EXPECT_NEAR(c[0], cx, 1e-9);
    EXPECT_NEAR(c[1], cy, 1e-9);
    EXPECT_NEAR(c[2], r, 1e-12);
  }
}

TEST(CastVotes, WeightSplitsOverWordsAndOccurrences) {
  // Word 0 has five class-0 occurrences; word 1 has one.
  std::vector<Occ> occs;
  for (int i = 0; i < 5; ++i) occs.push_back({0, 0, double(i), 0, 1});
  occs.push_back({1, 0, 0, 0, 1});
  const auto m = make_model(2, 1, occs);
  const FeatureSet fs{{10, 10, 1, std::nullopt, {}}};
  const std::vector<std::vector<Activation>> acts{{{0, 0.9}, {1, 0.8}}};
  const auto votes = cast_votes(fs, acts, m, Variant::ISM);
  ASSERT_EQ(votes.size(), 6u);
  for (const auto& v : votes) EXPECT_DOUBLE_EQ(v.weight, v.word_id == 0 ? 0.1 : 0.5);
}

TEST(CastVotes, ClassAwareNormalizer) {
  // Word 0: three class-0 occurrences and one class-1 occurrence.
  const auto m = make_model(1, 2, {{0, 0, 0, 0, 1}, {0, 0, 1, 0, 1}, {0, 0, 2, 0, 1}, {0, 1, 0, 0, 1}});
  const FeatureSet fs{{0, 0, 1, std::nullopt, {}}};
  const std::vector<std::vector<Activation>> acts{{{0, 1.0}}};
  for (const auto v : {Variant::ISM, Variant::JISM}) {
    for (const auto& vt : cast_votes(fs, acts, m, v)) {
      const double expect = v == Variant::ISM ? 0.25 : (m.occurrences[vt.occurrence].class_id == 0 ? 1.0 / 3 : 1.0);
      EXPECT_DOUBLE_EQ(vt.weight, expect);
      EXPECT_EQ(vt.class_id.has_value(), v != Variant::ISM);
    }
  }
}

TEST(CastVotes, PerFeatureWeightSumsToOne) {
  std::mt19937_64 rng(11);
  std::vector<Occ> occs;
  for (int i = 0; i < 60; ++i) occs.push_back({rng() % 6, 0, double(i), 0, 1});
  const auto m = make_model(8, 1, occs);  // words 6 and 7 have no occurrences
  FeatureSet fs;
  std::vector<std::vector<Activation>> acts;
  for (int i = 0; i < 20; ++i) {
    fs.push_back({double(i), 0, 1, std::nullopt, {}});
    std::vector<Activation> a;
    for (std::size_t w = 0; w < 6; ++w)
      if (rng() % 2) a.push_back({w, 0.9});
    acts.push_back(a);
  }
  const auto votes = cast_votes(fs, acts, m, Variant::ISM);
  std::vector<double> sum(fs.size(), 0.0);
  for (const auto& v : votes) sum[v.feature] += v.weight;
  for (std::size_t i = 0; i < fs.size(); ++i)
    if (!acts[i].empty()) EXPECT_NEAR(sum[i], 1.0, 1e-12);
}

TEST(CastVotes, DepthVariantsSkipFeaturesWithoutDepth) {
  const auto m = make_model(1, 1, {{0, 0, 0, 0, 1}});
  const FeatureSet fs{{0, 0, 1, std::nullopt, {}}, {5, 5, 1, 2.0, {}}};
  const std::vector<std::vector<Activation>> acts{{{0, 1.0}}, {{0, 1.0}}};
  EXPECT_EQ(cast_votes(fs, acts, m, Variant::ISM).size(), 2u);
  const auto v = cast_votes(fs, acts, m, Variant::JI3SM2);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].feature, 1u);
}

TEST(CastVotes, JismWithOneClassMatchesIsm) {
  std::vector<Occ> occs;
  for (int i = 0; i < 30; ++i) occs.push_back({std::size_t(i % 4), 0, double(i % 7) - 3, double(i % 5) - 2, 1 + 0.1 * (i % 3)});
  const auto m = make_model(4, 1, occs);
  FeatureSet fs;
  std::vector<std::vector<Activation>> acts;
  for (int i = 0; i < 10; ++i) {
    fs.push_back({40.0 + i % 3, 30.0 + i % 2, 1.0, std::nullopt, {}});
    acts.push_back({{std::size_t(i % 4), 0.9}});
  }
  const auto a = cast_votes(fs, acts, m, Variant::ISM);
  const auto b = cast_votes(fs, acts, m, Variant::JISM);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].coords, b[i].coords);
    EXPECT_DOUBLE_EQ(a[i].weight, b[i].weight);
  }
  const auto ha = mean_shift(a, {}, Variant::ISM);
  const auto hb = mean_shift(b, {}, Variant::JISM);
  ASSERT_EQ(ha.size(), hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(ha[i].coords, hb[i].coords);
    EXPECT_DOUBLE_EQ(ha[i].score, hb[i].score);
  }
}

TEST(MeanShift, IdenticalVotesGiveOneMode) {
  std::vector<Vote> v(5, vote_at(50, 40, 1.0, 0.2));
  const auto h = mean_shift(v, {}, Variant::ISM);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_DOUBLE_EQ(h[0].x(), 50.0);
  EXPECT_DOUBLE_EQ(h[0].y(), 40.0);
  EXPECT_NEAR(h[0].score, 1.0, 1e-12);
  EXPECT_EQ(h[0].support.size(), 5u);
}

TEST(MeanShift, SeparatedGroups) {
  std::vector<Vote> v;
  for (int i = 0; i < 6; ++i) v.push_back(vote_at(20 + i % 3, 20 + i % 2, 1.0, 0.1));
  for (int i = 0; i < 3; ++i) v.push_back(vote_at(120 + i, 80, 1.0, 0.1));
  const auto h = mean_shift(v, {}, Variant::ISM);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_NEAR(h[0].x(), 21.0, 1e-9);
  EXPECT_NEAR(h[0].y(), 20.5, 1e-9);
  EXPECT_NEAR(h[0].score, 0.6, 1e-12);
  EXPECT_NEAR(h[1].x(), 121.0, 1e-9);
  EXPECT_NEAR(h[1].score, 0.3, 1e-12);
}

TEST(MeanShift, InputOrderDoesNotMatter) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 6);
  std::vector<Vote> v;
  for (int i = 0; i < 80; ++i) v.push_back(vote_at((i % 2 ? 60 : 140) + n(rng), 50 + n(rng), 1.0, 0.05 + 0.01 * (i % 4)));
  const auto a = mean_shift(v, {}, Variant::ISM);
  std::shuffle(v.begin(), v.end(), rng);
  const auto b = mean_shift(v, {}, Variant::ISM);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].coords, b[i].coords);
    EXPECT_NEAR(a[i].score, b[i].score, 1e-12);
    EXPECT_EQ(a[i].support.size(), b[i].support.size());
  }
}

TEST(MeanShift, DepthSeparatesCoincidentObjects) {
  // Same image position, depths 0.4 apart (> 2 * b_d).
  std::vector<Vote> v;
  for (int i = 0; i < 4; ++i) v.push_back(vote_at(100, 100, 1.5, 0.1, 0));
  for (int i = 0; i < 4; ++i) v.push_back(vote_at(100, 100, 1.9, 0.1, 0));
  EXPECT_EQ(mean_shift(v, {}, Variant::JI3SM2).size(), 2u);
  // Without depth in the space, the two collapse.
  for (auto& x : v) x.coords[2] = 1.0;
  EXPECT_EQ(mean_shift(v, {}, Variant::JISM).size(), 1u);
}

TEST(MeanShift, ClassesArePartitioned) {
  std::vector<Vote> v{vote_at(10, 10, 1, 0.3, 0), vote_at(10, 10, 1, 0.2, 1)};
  const auto h = mean_shift(v, {}, Variant::JISM);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h[0].class_id, 0u);
  EXPECT_EQ(h[1].class_id, 1u);
}

TEST(MeanShift, RejectsNonPositiveBandwidth) {
  Bandwidths b;
  b.xy = 0;
  const std::vector<Vote> v{vote_at(1, 1, 1, 1)};
  EXPECT_THROW(mean_shift(v, b, Variant::ISM), ConfigError);
}

TEST(Confidence, Examples) {
  std::vector<Vote> one(4, vote_at(30, 30, 1, 0.25));
  auto h = mean_shift(one, {}, Variant::ISM);
  EXPECT_DOUBLE_EQ(*voting_confidence(one, h, {}, Variant::ISM), 1.0);

  std::vector<Vote> two{vote_at(30, 30, 1, 0.5), vote_at(200, 30, 1, 0.5)};
  h = mean_shift(two, {}, Variant::ISM);
  EXPECT_DOUBLE_EQ(*voting_confidence(two, h, {}, Variant::ISM), 0.5);

  EXPECT_FALSE(voting_confidence({}, {}, {}, Variant::ISM).has_value());
}

TEST(Csv, VotesAndHypotheses) {
  std::vector<Vote> v{vote_at(1, 2, 1.5, 0.5, 1), vote_at(3, 4, 1.5, 0.5, 1)};
  std::ostringstream vs;
  write_votes_csv(vs, v, Variant::JISM);
  EXPECT_EQ(vs.str(),
            "variant,c0,c1,c2,c3,class,weight,feature,word,occurrence\n"
            "jism,1,2,1.5,,1,0.5,0,0,0\n"
            "jism,3,4,1.5,,1,0.5,0,0,0\n");
  std::vector<Vote> same{vote_at(10, 20, 1.5, 0.5, 1), vote_at(10, 20, 1.5, 0.5, 1)};
  std::ostringstream hs;
  write_hypotheses_csv(hs, mean_shift(same, {}, Variant::JISM), Variant::JISM);
  EXPECT_EQ(hs.str(), "variant,c0,c1,c2,c3,class,score,support\njism,10,20,1.5,,1,1,2\n");
}

TEST(Variants, ParseRoundTrip) {
  for (auto v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_FALSE(parse_variant("ji3sm4").has_value());
}
