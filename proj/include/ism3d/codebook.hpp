#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ism3d/common.hpp"

namespace ism3d {

struct Word {
  std::size_t id = 0;
  Descriptor centroid;
  std::size_t member_count = 1;
  std::vector<std::size_t> activations_by_class;
  double gain = 0.0;  // bits

  bool operator==(const Word&) const = default;
};

struct Codebook {
  std::vector<Word> words;  // sorted by id
  std::size_t descriptor_dim = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return words.size(); }
  std::size_t n_classes() const { return class_names.size(); }

  // Index into words for an id, or npos.
  std::size_t index_of(std::size_t id) const {
    auto it = std::lower_bound(words.begin(), words.end(), id, [](const Word& w, std::size_t v) { return w.id < v; });
    return (it != words.end() && it->id == id) ? static_cast<std::size_t>(it - words.begin()) : npos;
  }
  const Word& word(std::size_t id) const {
    const std::size_t i = index_of(id);
    if (i == npos) throw Error("unknown word id " + std::to_string(id));
    return words[i];
  }

  bool operator==(const Codebook&) const = default;

  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
};

// Joint word/class distribution estimated from activation counts.
struct WordStatistics {
  std::vector<std::size_t> word_ids;   // row labels
  std::size_t n_classes = 0;
  std::vector<double> joint;           // word-major, word_ids.size() x n_classes
  std::vector<double> marginal_word;
  std::vector<double> marginal_class;

  double p(std::size_t row, std::size_t c) const { return joint[row * n_classes + c]; }
  std::size_t row_of(std::size_t word_id) const {
    auto it = std::find(word_ids.begin(), word_ids.end(), word_id);
    if (it == word_ids.end()) throw Error("unknown word id " + std::to_string(word_id));
    return static_cast<std::size_t>(it - word_ids.begin());
  }
};

struct Activation {
  std::size_t word_id = 0;
  double similarity = 0.0;
  bool operator==(const Activation&) const = default;
};

// Average-linkage agglomerative clustering under cosine similarity, driven by
// reciprocal-nearest-neighbor chains. Returns clusters as sorted member
// index lists, ordered by their lowest member.
//
// Cluster similarity is the mean pairwise dot product, computed exactly from
// member sums: sim(A, B) = <sum A, sum B> / (|A| |B|). A chain whose reciprocal
// pair falls below t_cluster is retired whole: average linkage is reducible,
// so none of its clusters can ever reach the threshold again.
inline std::vector<std::vector<std::size_t>> rnn_partition(std::span<const Descriptor> descriptors, double t_cluster) {
  const std::size_t n = descriptors.size();
  if (n == 0) return {};
  const std::size_t dim = descriptors.front().size();
  for (const auto& d : descriptors)
    if (d.size() != dim) throw Error("cluster_rnn: descriptors differ in dimension");

  struct Slot {
    std::vector<double> sum;
    std::size_t count = 1;
    std::vector<std::size_t> members;
  };
  std::vector<Slot> slots(n);
  for (std::size_t i = 0; i < n; ++i) slots[i] = {descriptors[i], 1, {i}};

  // Active slots in ascending index order; retired ones go to `done`.
  std::vector<std::size_t> active(n);
  std::iota(active.begin(), active.end(), 0);
  std::vector<std::vector<std::size_t>> done;

  auto sim = [&](std::size_t a, std::size_t b) {
    const auto& A = slots[a];
    const auto& B = slots[b];
    return dot(A.sum, B.sum) / (static_cast<double>(A.count) * static_cast<double>(B.count));
  };
  auto erase_active = [&](std::size_t s) {
    active.erase(std::lower_bound(active.begin(), active.end(), s));
  };

  std::vector<std::size_t> chain;
  while (!active.empty()) {
    if (chain.empty()) chain.push_back(active.front());
    const std::size_t top = chain.back();
    const std::size_t prev = chain.size() >= 2 ? chain[chain.size() - 2] : Codebook::npos;

    std::size_t nn = Codebook::npos;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t s : active) {
      if (s == top) continue;
      const double v = sim(top, s);
      if (v > best) {
        best = v;
        nn = s;
      }
    }
    if (nn == Codebook::npos) {  // last cluster standing
      done.push_back(std::move(slots[top].members));
      erase_active(top);
      chain.clear();
      continue;
    }
    if (prev != Codebook::npos && sim(top, prev) >= best) nn = prev;

    if (nn != prev) {
      chain.push_back(nn);
      continue;
    }
    // Reciprocal nearest neighbors.
    if (sim(top, prev) >= t_cluster) {
      const std::size_t keep = std::min(top, prev), drop = std::max(top, prev);
      auto& K = slots[keep];
      auto& D = slots[drop];
      for (std::size_t k = 0; k < dim; ++k) K.sum[k] += D.sum[k];
      K.count += D.count;
      K.members.insert(K.members.end(), D.members.begin(), D.members.end());
      D = Slot{};
      erase_active(drop);
      chain.pop_back();
      chain.pop_back();
    } else {
      for (std::size_t s : chain) {
        done.push_back(std::move(slots[s].members));
        erase_active(s);
      }
      chain.clear();
    }
  }
  for (auto& m : done) std::sort(m.begin(), m.end());
  std::sort(done.begin(), done.end(), [](const auto& a, const auto& b) { return a.front() < b.front(); });
  return done;
}

// Builds a codebook from clustering. Word ids follow cluster order; the
// centroid is the normalized member mean.
inline Codebook cluster_rnn(std::span<const Descriptor> descriptors, double t_cluster,
                            std::vector<std::string> class_names = {}) {
  Codebook cb;
  cb.class_names = std::move(class_names);
  cb.descriptor_dim = descriptors.empty() ? 0 : descriptors.front().size();
  const auto parts = rnn_partition(descriptors, t_cluster);
  cb.words.reserve(parts.size());
  for (std::size_t id = 0; id < parts.size(); ++id) {
    Word w;
    w.id = id;
    w.member_count = parts[id].size();
    w.centroid.assign(cb.descriptor_dim, 0.0);
    for (std::size_t m : parts[id])
      for (std::size_t k = 0; k < cb.descriptor_dim; ++k) w.centroid[k] += descriptors[m][k];
    if (normalize(w.centroid) == 0.0) w.centroid = descriptors[parts[id].front()];
    w.activations_by_class.assign(cb.class_names.size(), 0);
    cb.words.push_back(std::move(w));
  }
  return cb;
}

// Keeps words with member_count > t_q.
inline Codebook prune_small_clusters(Codebook cb, std::size_t t_q) {
  std::erase_if(cb.words, [t_q](const Word& w) { return w.member_count <= t_q; });
  return cb;
}

// counts[i][c]: activations of the i-th word (codebook order) on class-c
// training images. Raw frequencies, no smoothing.
inline WordStatistics word_statistics(const Codebook& cb, const std::vector<std::vector<std::size_t>>& counts) {
  if (counts.size() != cb.size()) throw Error("word_statistics: count table rows != codebook size");
  WordStatistics st;
  st.n_classes = cb.n_classes() ? cb.n_classes() : (counts.empty() ? 0 : counts.front().size());
  double total = 0.0;
  for (const auto& row : counts) {
    if (row.size() != st.n_classes) throw Error("word_statistics: count table has wrong class count");
    for (std::size_t v : row) total += static_cast<double>(v);
  }
  if (total <= 0.0) throw Error("word_statistics: zero total activations");
  st.word_ids.reserve(cb.size());
  for (const Word& w : cb.words) st.word_ids.push_back(w.id);
  st.joint.assign(cb.size() * st.n_classes, 0.0);
  st.marginal_word.assign(cb.size(), 0.0);
  st.marginal_class.assign(st.n_classes, 0.0);
  for (std::size_t i = 0; i < cb.size(); ++i)
    for (std::size_t c = 0; c < st.n_classes; ++c) st.joint[i * st.n_classes + c] = static_cast<double>(counts[i][c]) / total;
  // Marginals sum integer counts so they stay consistent with the joint.
  for (std::size_t i = 0; i < cb.size(); ++i) {
    std::size_t row = 0;
    for (std::size_t c = 0; c < st.n_classes; ++c) row += counts[i][c];
    st.marginal_word[i] = static_cast<double>(row) / total;
  }
  for (std::size_t c = 0; c < st.n_classes; ++c) {
    std::size_t col = 0;
    for (std::size_t i = 0; i < cb.size(); ++i) col += counts[i][c];
    st.marginal_class[c] = static_cast<double>(col) / total;
  }
  return st;
}

// Average pointwise mutual information between a word and the class labels,
// in bits: (1/n) sum_c P(w,c) log2(P(w,c) / (P(w) P(c))), zero cells skipped.
inline double information_gain(const WordStatistics& st, std::size_t word_id) {
  const std::size_t row = st.row_of(word_id);
  if (st.n_classes == 0) return 0.0;
  const double pw = st.marginal_word[row];
  double g = 0.0;
  for (std::size_t c = 0; c < st.n_classes; ++c) {
    const double pwc = st.p(row, c);
    if (pwc <= 0.0) continue;
    g += pwc * std::log2(pwc / (pw * st.marginal_class[c]));
  }
  return std::max(0.0, g / static_cast<double>(st.n_classes));
}

// Stores activation counts and gains on the words.
inline void apply_statistics(Codebook& cb, const WordStatistics& st, const std::vector<std::vector<std::size_t>>& counts) {
  for (std::size_t i = 0; i < cb.size(); ++i) {
    cb.words[i].activations_by_class = counts[i];
    cb.words[i].gain = information_gain(st, cb.words[i].id);
  }
}

struct GainPruneResult {
  Codebook codebook;
  std::size_t size_before = 0;
  std::size_t size_after = 0;
};

// Keeps words with G >= t_ig.
inline GainPruneResult prune_by_gain(const Codebook& cb, const WordStatistics& st, double t_ig) {
  GainPruneResult r{cb, cb.size(), 0};
  std::erase_if(r.codebook.words, [&](const Word& w) { return information_gain(st, w.id) < t_ig; });
  r.size_after = r.codebook.size();
  return r;
}

// Same, using the gains already stored on the words.
inline GainPruneResult prune_by_stored_gain(const Codebook& cb, double t_ig) {
  GainPruneResult r{cb, cb.size(), 0};
  std::erase_if(r.codebook.words, [&](const Word& w) { return w.gain < t_ig; });
  r.size_after = r.codebook.size();
  return r;
}

// All words with cosine similarity >= t_match, by similarity desc then id.
inline std::vector<Activation> match(const Codebook& cb, std::span<const double> descriptor, double t_match) {
  if (descriptor.size() != cb.descriptor_dim && !cb.words.empty())
    throw Error("match: descriptor dimension " + std::to_string(descriptor.size()) + " != codebook dimension " +
                std::to_string(cb.descriptor_dim));
  std::vector<Activation> out;
  for (const Word& w : cb.words) {
    const double s = dot(w.centroid, descriptor);
    if (s >= t_match) out.push_back({w.id, s});
  }
  std::sort(out.begin(), out.end(), [](const Activation& a, const Activation& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.word_id < b.word_id;
  });
  return out;
}

}  // namespace ism3d
