#include <gtest/gtest.h>

#include <random>

#include "ism3d/codebook.hpp"
#include "ism3d/synthgen.hpp"
#include "oracles.hpp"

using namespace ism3d;

namespace {

Codebook with_counts(const std::vector<std::size_t>& members) {
  Codebook cb;
  cb.descriptor_dim = 2;
  cb.class_names = {"a", "b"};
  for (std::size_t i = 0; i < members.size(); ++i) cb.words.push_back({i, {1.0, 0.0}, members[i], {0, 0}, 0.0});
  return cb;
}

Codebook blank(std::size_t words, std::size_t classes) {
  Codebook cb;
  cb.descriptor_dim = 1;
  for (std::size_t i = 0; i < words; ++i) cb.words.push_back({i, {1.0}, 1, {}, 0.0});
  for (std::size_t c = 0; c < classes; ++c) cb.class_names.push_back("c" + std::to_string(c));
  return cb;
}

std::vector<Descriptor> clustered(std::mt19937_64& rng, std::size_t n, std::size_t dim, std::size_t protos, double noise) {
  std::vector<Descriptor> P, out;
  for (std::size_t p = 0; p < protos; ++p) P.push_back(synth::random_unit(rng, dim));
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth::noisy(P[rng() % protos], noise, rng));
  return out;
}

}  // namespace

TEST(Cluster, IdenticalDescriptorsMerge) {
  const std::vector<Descriptor> d{{0.6, 0.8}, {0.6, 0.8}};
  const auto cb = cluster_rnn(d, 0.99);
  ASSERT_EQ(cb.size(), 1u);
  EXPECT_EQ(cb.words[0].member_count, 2u);
}

TEST(Cluster, OrthogonalDescriptorsStaySeparate) {
  const std::vector<Descriptor> d{{1.0, 0.0}, {0.0, 1.0}};
  EXPECT_EQ(cluster_rnn(d, 0.5).size(), 2u);
}

TEST(Cluster, EmptyInput) { EXPECT_EQ(cluster_rnn(std::vector<Descriptor>{}, 0.7).size(), 0u); }

TEST(Cluster, MatchesBruteForceAverageLinkage) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 40; ++rep) {
    const std::size_t n = rep < 10 ? 10 : 2 + rng() % 29;
    const auto d = clustered(rng, n, 8, 1 + rng() % 5, 0.9 * std::sqrt(8.0));
    const double t = std::uniform_real_distribution<double>(0.3, 0.9)(rng);
    auto got = rnn_partition(d, t);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, oracle::average_linkage(d, t)) << "instance " << rep;
  }
}

TEST(Cluster, CentroidsAreUnitNormMeans) {
  std::mt19937_64 rng(12);
  const auto d = clustered(rng, 30, 6, 3, 0.5);
  const auto cb = cluster_rnn(d, 0.7);
  const auto parts = rnn_partition(d, 0.7);
  ASSERT_EQ(cb.size(), parts.size());
  for (std::size_t i = 0; i < cb.size(); ++i) {
    Descriptor mean(6, 0.0);
    for (auto m : parts[i])
      for (std::size_t k = 0; k < 6; ++k) mean[k] += d[m][k];
    normalize(mean);
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(cb.words[i].centroid[k], mean[k], 1e-12);
    EXPECT_EQ(cb.words[i].member_count, parts[i].size());
  }
}

TEST(Cluster, DependsOnlyOnInputOrderDeterministically) {
  std::mt19937_64 rng(13);
  const auto d = clustered(rng, 25, 5, 4, 0.6);
  EXPECT_EQ(cluster_rnn(d, 0.6), cluster_rnn(d, 0.6));
}

// Holds for well-separated prototypes (64-d, copy noise 0.3). With heavily
// overlapping low-dimensional prototypes average linkage can regroup the
// union into more clusters.
TEST(Cluster, JointCodebookNeverLargerThanSeparateOnes) {
  std::mt19937_64 rng(14);
  for (int rep = 0; rep < 20; ++rep) {
    const auto a = clustered(rng, 30, 64, 6, 0.3), b = clustered(rng, 30, 64, 6, 0.3);
    auto ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    EXPECT_LE(cluster_rnn(ab, 0.7).size(), cluster_rnn(a, 0.7).size() + cluster_rnn(b, 0.7).size());
  }
}

TEST(PruneSmall, Examples) {
  EXPECT_EQ(prune_small_clusters(with_counts({1, 2, 3}), 0).size(), 3u);
  EXPECT_EQ(prune_small_clusters(with_counts({1, 2, 3}), 1).size(), 2u);
  EXPECT_EQ(prune_small_clusters(with_counts({1, 2, 3}), 2).size(), 1u);
}

TEST(Statistics, SingleCell) {
  const auto st = word_statistics(blank(1, 1), {{7}});
  EXPECT_DOUBLE_EQ(st.p(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(st.marginal_word[0], 1.0);
  EXPECT_DOUBLE_EQ(st.marginal_class[0], 1.0);
}

TEST(Statistics, Uniform) {
  const auto st = word_statistics(blank(2, 2), {{10, 10}, {10, 10}});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(st.p(i, c), 0.25);
  EXPECT_DOUBLE_EQ(st.marginal_word[0], 0.5);
  EXPECT_DOUBLE_EQ(st.marginal_class[1], 0.5);
}

TEST(Statistics, Diagonal) {
  const auto st = word_statistics(blank(2, 2), {{10, 0}, {0, 10}});
  EXPECT_DOUBLE_EQ(st.p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(st.p(1, 1), 0.5);
  EXPECT_DOUBLE_EQ(st.p(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(st.p(1, 0), 0.0);
}

TEST(Statistics, ZeroTotalIsAnError) { EXPECT_THROW(word_statistics(blank(2, 2), {{0, 0}, {0, 0}}), Error); }

TEST(Statistics, NormalizedAndConsistent) {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t W = 1 + rng() % 12, C = 1 + rng() % 5;
    std::vector<std::vector<std::size_t>> counts(W, std::vector<std::size_t>(C));
    for (auto& r : counts)
      for (auto& v : r) v = rng() % 40;
    counts[0][0] += 1;
    const auto st = word_statistics(blank(W, C), counts);
    double total = 0.0;
    for (std::size_t i = 0; i < W; ++i) {
      double row = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        EXPECT_GE(st.p(i, c), 0.0);
        EXPECT_LE(st.p(i, c), 1.0);
        row += st.p(i, c);
      }
      EXPECT_NEAR(row, st.marginal_word[i], 1e-9);
      total += row;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
    for (std::size_t c = 0; c < C; ++c) {
      double col = 0.0;
      for (std::size_t i = 0; i < W; ++i) col += st.p(i, c);
      EXPECT_NEAR(col, st.marginal_class[c], 1e-9);
    }
  }
}

TEST(Gain, ZeroUnderIndependence) {
  const auto st = word_statistics(blank(2, 2), {{10, 30}, {20, 60}});
  EXPECT_NEAR(information_gain(st, 0), 0.0, 1e-15);
  EXPECT_NEAR(information_gain(st, 1), 0.0, 1e-15);
}

TEST(Gain, ClassExclusiveWordIsAQuarterBit) {
  const auto st = word_statistics(blank(2, 2), {{10, 0}, {0, 10}});
  EXPECT_DOUBLE_EQ(information_gain(st, 0), 0.25);
}

TEST(Gain, MatchesDirectSummationAndIsNonNegative) {
  std::mt19937_64 rng(22);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t W = 1 + rng() % 15, C = 2 + rng() % 6;
    std::vector<std::vector<std::size_t>> counts(W, std::vector<std::size_t>(C));
    for (auto& r : counts)
      for (auto& v : r) v = rng() % 3 ? rng() % 50 : 0;
    counts[0][0] += 1;
    const auto st = word_statistics(blank(W, C), counts);
    for (std::size_t w = 0; w < W; ++w) {
      const double g = information_gain(st, w);
      EXPECT_GE(g, 0.0);
      EXPECT_NEAR(g, oracle::gain(counts, w), 1e-9);
    }
  }
}

TEST(Gain, UnknownWordIsAnError) {
  const auto st = word_statistics(blank(2, 2), {{1, 0}, {0, 1}});
  EXPECT_THROW(information_gain(st, 17), Error);
}

TEST(PruneGain, Examples) {
  auto cb = blank(2, 2);
  const auto st = word_statistics(cb, {{10, 10}, {10, 0}});
  // word 0 has a positive gain here, word 1 is class-exclusive
  const auto id = prune_by_gain(cb, st, 0.0);
  EXPECT_EQ(id.codebook, cb);
  EXPECT_EQ(id.size_before, 2u);
  EXPECT_EQ(id.size_after, 2u);

  cb.words[0].gain = 0.0;
  cb.words[1].gain = 0.25;
  const auto r = prune_by_stored_gain(cb, 0.1);
  ASSERT_EQ(r.size_after, 1u);
  EXPECT_EQ(r.codebook.words[0].id, 1u);
}

TEST(PruneGain, SizeNonIncreasingAlongGrid) {
  std::mt19937_64 rng(23);
  auto cb = blank(40, 4);
  std::vector<std::vector<std::size_t>> counts(40, std::vector<std::size_t>(4));
  for (auto& r : counts)
    for (auto& v : r) v = rng() % 4 ? rng() % 20 : 0;
  counts[0][0] += 1;
  const auto st = word_statistics(cb, counts);
  apply_statistics(cb, st, counts);
  std::size_t prev = cb.size();
  for (int i = 0; i <= 20; ++i) {
    const double t = 0.01 * i / 20.0;
    const auto r = prune_by_gain(cb, st, t);
    EXPECT_LE(r.size_after, prev);
    EXPECT_EQ(r.size_after, prune_by_stored_gain(cb, t).size_after);
    prev = r.size_after;
  }
}

TEST(Match, CentroidActivatesItsWord) {
  Codebook cb;
  cb.descriptor_dim = 2;
  cb.words = {{0, {1.0, 0.0}, 1, {}, 0.0}, {1, {0.0, 1.0}, 1, {}, 0.0}};
  const auto a = match(cb, Descriptor{0.0, 1.0}, 0.7);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].word_id, 1u);
  EXPECT_DOUBLE_EQ(a[0].similarity, 1.0);
}

TEST(Match, OrthogonalFeatureActivatesNothing) {
  Codebook cb;
  cb.descriptor_dim = 3;
  cb.words = {{0, {1.0, 0.0, 0.0}, 1, {}, 0.0}, {1, {0.0, 1.0, 0.0}, 1, {}, 0.0}};
  EXPECT_TRUE(match(cb, Descriptor{0.0, 0.0, 1.0}, 0.1).empty());
}

TEST(Match, HandDotProductAndOrdering) {
  Codebook cb;
  cb.descriptor_dim = 4;
  cb.words = {{0, {0.5, 0.5, 0.5, 0.5}, 1, {}, 0.0}, {1, {1.0, 0.0, 0.0, 0.0}, 1, {}, 0.0},
              {2, {0.5, 0.5, 0.5, 0.5}, 1, {}, 0.0}};
  const Descriptor f{0.7, 0.1, 0.1, 0.7};
  // 0.5 * (0.7 + 0.1 + 0.1 + 0.7) = 0.8; 1.0 * 0.7 = 0.7
  const auto a = match(cb, f, 0.0);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_NEAR(a[0].similarity, 0.8, 1e-15);
  EXPECT_EQ(a[0].word_id, 0u);
  EXPECT_EQ(a[1].word_id, 2u);
  EXPECT_NEAR(a[2].similarity, 0.7, 1e-15);
  EXPECT_EQ(match(cb, f, 0.75).size(), 2u);
}

TEST(Match, DimensionMismatchIsAnError) {
  Codebook cb;
  cb.descriptor_dim = 2;
  cb.words = {{0, {1.0, 0.0}, 1, {}, 0.0}};
  EXPECT_THROW(match(cb, Descriptor{1.0, 0.0, 0.0}, 0.5), Error);
}
