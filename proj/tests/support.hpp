#pragma once

// Shared test helpers: scratch directories, an independent projective-tree
// enumerator, and small hand-built score fixtures.

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "synsurp/path_search.hpp"
#include "synsurp/scoring.hpp"
#include "synsurp/treebank_io.hpp"

namespace testing_support {

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("synsurp_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Every head vector on n tokens (heads in 0..n, 1-based tokens) that forms a tree
/// rooted at 0. `single_root` keeps only trees with one root child.
inline std::vector<std::vector<int>> rooted_trees(int n, bool single_root) {
  std::vector<std::vector<int>> out;
  std::vector<int> h(static_cast<std::size_t>(n), 0);
  std::function<void(int)> rec = [&](int i) {
    if (i == n) {
      int roots = 0;
      for (int x : h) roots += x == 0;
      if (single_root && roots != 1) return;
      for (int d = 1; d <= n; ++d) {
        int cur = d, steps = 0;
        while (cur != 0 && steps <= n) {
          cur = h[static_cast<std::size_t>(cur - 1)];
          ++steps;
        }
        if (cur != 0) return;
      }
      out.push_back(h);
      return;
    }
    for (int v = 0; v <= n; ++v) {
      if (v == i + 1) continue;
      h[static_cast<std::size_t>(i)] = v;
      rec(i + 1);
    }
  };
  rec(0);
  return out;
}

/// Projectivity by yield contiguity: every token's subtree covers an interval.
inline bool contiguous_yields(const std::vector<int>& heads) {
  const int n = static_cast<int>(heads.size());
  for (int r = 1; r <= n; ++r) {
    int lo = n + 1, hi = 0, count = 0;
    for (int d = 1; d <= n; ++d) {
      int cur = d;
      while (cur != 0 && cur != r) cur = heads[static_cast<std::size_t>(cur - 1)];
      if (cur == r) {
        lo = std::min(lo, d);
        hi = std::max(hi, d);
        ++count;
      }
    }
    if (hi - lo + 1 != count) return false;
  }
  return true;
}

/// Projectivity by pairwise arc crossing, the root arc drawn to a point beyond the sentence.
inline bool no_crossing_arcs(const std::vector<int>& heads) {
  const int n = static_cast<int>(heads.size());
  auto span = [&](int d) {
    int h = heads[static_cast<std::size_t>(d - 1)];
    if (h == 0) h = n + 1;
    return std::pair{std::min(h, d), std::max(h, d)};
  };
  for (int a = 1; a <= n; ++a)
    for (int b = 1; b <= n; ++b) {
      auto [l1, r1] = span(a);
      auto [l2, r2] = span(b);
      if (l1 < l2 && l2 < r1 && r1 < r2) return false;
    }
  return true;
}

inline synsurp::Sentence tree_sentence(const std::vector<int>& heads, const std::vector<std::string>& labels = {}) {
  synsurp::Sentence s;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    s.tokens.push_back("w" + std::to_string(i + 1));
    s.heads.push_back(heads[i]);
    s.labels.push_back(labels.empty() ? (heads[i] == 0 ? "root" : "dep") : labels[i]);
  }
  return s;
}

/// Random table scorer: independent random bundles for every (top, front) pair.
inline synsurp::TableScorer random_table(int n, std::size_t word_classes, std::size_t labels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95), w(0.1, 1.0);
  synsurp::TableScorer t(synsurp::make_bundle(0.5, 0.5, word_classes, labels));
  for (int top = 0; top <= n + 1; ++top)
    for (int front = 0; front <= n + 1; ++front) {
      auto b = synsurp::make_bundle(u(rng), u(rng), word_classes, labels);
      double z = 0.0;
      for (auto& p : b.word_dist) z += p = w(rng);
      for (auto& p : b.word_dist) p /= z;
      if (labels) {
        z = 0.0;
        for (auto& p : b.label_dist) z += p = w(rng);
        for (auto& p : b.label_dist) p /= z;
      }
      t.set(top, front, b);
    }
  return t;
}

/// A small model over a toy vocabulary (word classes "w0".."w{V-1}").
inline synsurp::ModelDims small_dims(std::size_t word_classes, std::size_t labels, std::size_t embed = 6,
                                     std::size_t hidden = 8) {
  synsurp::ModelDims d;
  d.mode = synsurp::EncoderMode::internal;
  d.input = synsurp::InputMode::generative;
  d.word_classes = word_classes;
  d.labels = labels;
  d.encoder_vocab = word_classes + 2;
  d.embed_dim = embed;
  d.hidden_dim = hidden;
  return d;
}


/// Fragment state before the third word: one live path holding mass 0.99 at
/// (stack=[1], j=2). Shifting keeps 0.546 of the total, reducing first keeps 0.444.
struct TwoPathFragment {
  synsurp::WordSyncPool before;
  synsurp::TableScorer scorer{synsurp::make_bundle(0.5, 0.5, 2)};
  std::vector<int> words{0, 1, 1};
};

inline TwoPathFragment two_path_fragment() {
  using namespace synsurp;
  TwoPathFragment f;
  std::vector<Action> hist{Action::shift()};
  PathItem p;
  p.config = replay(hist, 3);
  p.history = hist;
  p.logp_syn = std::log2(0.99);
  p.logp_full = p.logp_syn + std::log2(1.0 / 3.0);
  f.before.word_index = 2;
  f.before.paths.push_back(p);
  f.scorer.set(1, 2, make_bundle(0.546 / 0.99, 0.5, 2));
  return f;
}

/// Four words where the path ranked second by full probability after word 3 has the
/// larger syntactic mass, and its continuation ranks first after word 4.
inline synsurp::TableScorer rejoin_table() {
  using namespace synsurp;
  auto with_words = [](double p_shift, double p_left, std::vector<double> words) {
    auto b = make_bundle(p_shift, p_left, 2);
    b.word_dist = std::move(words);
    return b;
  };
  TableScorer t(make_bundle(0.5, 0.5, 2));
  t.set(1, 2, with_words(0.4, 0.5, {0.05, 0.9, 0.05}));
  t.set(0, 2, with_words(0.5, 0.5, {0.85, 0.1, 0.05}));
  t.set(2, 3, with_words(0.01, 0.5, {0.5, 0.001, 0.499}));
  t.set(1, 3, with_words(0.99, 0.5, {0.5, 0.001, 0.499}));
  t.set(0, 3, with_words(0.5, 0.5, {0.05, 0.9, 0.05}));
  return t;
}

inline const std::vector<int>& rejoin_words() {
  static const std::vector<int> w{0, 0, 1, 1};
  return w;
}

/// Rejoin under the default syntactic ranking: after word 3 the Shift path (0.6)
/// outranks the LeftArc path (0.4); at word 4 the former fragments over three
/// continuations while the latter keeps 0.28 on a single one.
inline synsurp::TableScorer rejoin_syntactic_table() {
  using namespace synsurp;
  TableScorer t(make_bundle(0.5, 0.5, 2));
  t.set(1, 2, make_bundle(0.6, 0.5, 2));
  t.set(2, 3, make_bundle(0.3, 0.5, 2));
  t.set(1, 3, make_bundle(0.5, 0.5, 2));
  return t;
}

}  // namespace testing_support
