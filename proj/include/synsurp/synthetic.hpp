#pragma once

// Seeded synthetic data: a small dependency grammar over pseudo-words (treebank
// and story text), stimulus timing and acoustic features for the story, and BOLD
// panels with a planted regressor effect.
//
// Trees are built top-down and linearised with every subtree contiguous, so all
// output is projective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "synsurp/neuro_regression.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp::synthetic {

class Grammar {
 public:
  explicit Grammar(std::uint64_t lexicon_seed = 2090) {
    std::mt19937_64 rng(lexicon_seed);
    nouns_ = make_words(rng, 600, {"ion", "er", "ity", "o", "a", "ment"});
    verbs_ = make_words(rng, 250, {"ed", "es", "ing"});
    adjs_ = make_words(rng, 150, {"al", "ous", "ive", "ic"});
    advs_ = make_words(rng, 60, {"ly"});
  }

  /// One sentence with a gold projective tree.
  Sentence sentence(std::mt19937_64& rng) const {
    auto root = clause(rng, 0);
    root->label = "root";
    root->right.push_back(leaf(".", "punct"));
    Sentence s;
    linearise(*root, 0, s);
    return s;
  }

  /// Approximate per-million frequencies implied by the sampling weights.
  FrequencyTable frequency_table() const {
    FrequencyTable f;
    auto add = [&](const std::vector<std::string>& words, double share) {
      const auto w = zipf_weights(words.size());
      for (std::size_t i = 0; i < words.size(); ++i) f[words[i]] += 1e6 * share * w[i];
    };
    add(nouns_, 0.30);
    add(verbs_, 0.15);
    add(adjs_, 0.07);
    add(advs_, 0.03);
    add(kDet, 0.15);
    add(kPrep, 0.12);
    add(kPron, 0.06);
    add(kAux, 0.04);
    add(kCc, 0.03);
    add(kMark, 0.02);
    return f;
  }

 private:
  struct Node {
    std::string form;
    std::string label;
    std::vector<std::unique_ptr<Node>> left, right;
  };
  using NodePtr = std::unique_ptr<Node>;

  inline static const std::vector<std::string> kDet{"the", "a", "this", "every", "some", "no"};
  inline static const std::vector<std::string> kPrep{"of", "with", "about", "in", "on", "from", "to", "by", "at", "under"};
  inline static const std::vector<std::string> kPron{"he", "she", "they", "it", "we", "you"};
  inline static const std::vector<std::string> kAux{"will", "can", "has", "must", "might", "did"};
  inline static const std::vector<std::string> kCc{"and", "or", "but"};
  inline static const std::vector<std::string> kMark{"because", "while", "if", "whether"};

  std::vector<std::string> nouns_, verbs_, adjs_, advs_;
  mutable std::map<std::size_t, std::discrete_distribution<std::size_t>> zipf_;

  static std::vector<double> zipf_weights(std::size_t n) {
    std::vector<double> w(n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += w[i] = 1.0 / std::pow(static_cast<double>(i + 1), 1.05);
    for (auto& v : w) v /= z;
    return w;
  }

  static std::vector<std::string> make_words(std::mt19937_64& rng, std::size_t n, const std::vector<std::string>& endings) {
    static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "pl", "gr"};
    static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
    std::vector<std::string> out;
    std::uniform_int_distribution<int> syl(1, 2), on(0, 17), vo(0, 6);
    std::uniform_int_distribution<std::size_t> en(0, endings.size() - 1);
    while (out.size() < n) {
      std::string w;
      for (int s = syl(rng); s > 0; --s) w += std::string(onsets[on(rng)]) + vowels[vo(rng)];
      w += std::string(onsets[on(rng)]) + endings[en(rng)];
      if (std::find(out.begin(), out.end(), w) == out.end()) out.push_back(w);
    }
    return out;
  }

  /// Zipf draw over the list order.
  const std::string& pick(const std::vector<std::string>& words, std::mt19937_64& rng) const {
    auto it = zipf_.find(words.size());
    if (it == zipf_.end()) {
      auto w = zipf_weights(words.size());
      it = zipf_.emplace(words.size(), std::discrete_distribution<std::size_t>(w.begin(), w.end())).first;
    }
    return words[it->second(rng)];
  }

  static bool chance(std::mt19937_64& rng, double p) { return std::bernoulli_distribution(p)(rng); }

  static NodePtr leaf(std::string form, std::string label) {
    auto n = std::make_unique<Node>();
    n->form = std::move(form);
    n->label = std::move(label);
    return n;
  }

  NodePtr noun_phrase(std::mt19937_64& rng, int depth, std::string label) const {
    if (chance(rng, 0.2)) return leaf(pick(kPron, rng), std::move(label));
    auto n = leaf(pick(nouns_, rng), std::move(label));
    if (chance(rng, 0.85)) n->left.push_back(leaf(pick(kDet, rng), "det"));
    if (chance(rng, 0.3)) n->left.push_back(leaf(pick(adjs_, rng), "amod"));
    if (chance(rng, 0.1)) n->left.push_back(leaf(pick(adjs_, rng), "amod"));
    if (depth < 2 && chance(rng, 0.15)) n->right.push_back(prep_phrase(rng, depth + 1, "nmod", 0));
    if (depth < 2 && chance(rng, 0.06)) {
      auto c = noun_phrase(rng, depth + 1, "conj");
      c->left.insert(c->left.begin(), leaf(pick(kCc, rng), "cc"));
      n->right.push_back(std::move(c));
    }
    return n;
  }

  /// Prepositional phrase headed by its noun; `prep_bias` selects the preposition range.
  NodePtr prep_phrase(std::mt19937_64& rng, int depth, std::string label, int prep_bias) const {
    // The first three prepositions mostly modify nouns, the rest mostly verbs.
    std::string prep = prep_bias == 0 ? kPrep[std::uniform_int_distribution<std::size_t>(0, 2)(rng)]
                                      : kPrep[std::uniform_int_distribution<std::size_t>(3, kPrep.size() - 1)(rng)];
    auto n = noun_phrase(rng, depth, std::move(label));
    n->left.insert(n->left.begin(), leaf(prep, "case"));
    return n;
  }

  NodePtr clause(std::mt19937_64& rng, int depth) const {
    auto v = leaf(pick(verbs_, rng), "");
    v->left.push_back(noun_phrase(rng, depth, "nsubj"));
    if (chance(rng, 0.25)) v->left.push_back(leaf(pick(kAux, rng), "aux"));
    if (chance(rng, 0.1)) v->left.push_back(leaf(pick(advs_, rng), "advmod"));
    NodePtr* object = nullptr;
    if (chance(rng, 0.7)) {
      v->right.push_back(noun_phrase(rng, depth, "obj"));
      object = &v->right.back();
    }
    for (int k = 0; k < 2; ++k) {
      if (!chance(rng, k == 0 ? 0.55 : 0.25)) continue;
      const bool noun_pp = chance(rng, 0.5);
      if (noun_pp && object && (*object)->left.size() + (*object)->right.size() > 0 && depth < 2)
        (*object)->right.push_back(prep_phrase(rng, depth + 1, "nmod", 0));
      else
        v->right.push_back(prep_phrase(rng, depth + 1, "obl", 1));
      object = nullptr;  // later material may not reopen the object phrase
    }
    if (chance(rng, 0.15)) v->right.push_back(leaf(pick(advs_, rng), "advmod"));
    if (depth < 1 && chance(rng, 0.15)) {
      auto c = clause(rng, depth + 1);
      c->label = "ccomp";
      c->left.insert(c->left.begin(), leaf(pick(kMark, rng), "mark"));
      v->right.push_back(std::move(c));
    } else if (depth < 1 && chance(rng, 0.1)) {
      auto c = clause(rng, depth + 1);
      c->label = "conj";
      c->left.insert(c->left.begin(), leaf(pick(kCc, rng), "cc"));
      v->right.push_back(leaf(",", "punct"));
      v->right.push_back(std::move(c));
    }
    return v;
  }

  // Left dependents precede their head, so they are written with a placeholder
  // head and patched once the head's position is known.
  static constexpr int kPending = -1000;

  /// Appends the subtree in surface order; `head` is the parent's position (0 = root).
  static int linearise(const Node& n, int head, Sentence& s) {
    std::vector<int> pending;
    for (const auto& l : n.left) pending.push_back(linearise(*l, kPending, s));
    s.tokens.push_back(n.form);
    s.heads.push_back(head);
    s.labels.push_back(n.label);
    const int self = static_cast<int>(s.tokens.size());
    for (int p : pending) fix_heads(s, p, self);
    for (const auto& r : n.right) linearise(*r, self, s);
    return self;
  }

  static void fix_heads(Sentence& s, int dependent, int head) { s.heads[static_cast<std::size_t>(dependent - 1)] = head; }
};

/// `count` sentences from a grammar with the given lexicon seed.
inline std::vector<Sentence> generate_treebank(std::size_t count, std::uint64_t seed, std::uint64_t lexicon_seed = 2090) {
  Grammar g(lexicon_seed);
  std::mt19937_64 rng(seed);
  std::vector<Sentence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(g.sentence(rng));
  return out;
}

// ---------------------------------------------------------------------------
// Story stimulus

struct Story {
  std::vector<std::vector<std::string>> sentences;
  StimulusAlignment alignment;  // punctuation tokens carry no timing
  FeatureSeries f0;
  FeatureSeries rms;
  FrequencyTable frequency;
};

inline bool punctuation_token(const std::string& t) { return t == "." || t == ","; }

/// Sentences from the grammar with word timings (about 2.5 words per second) and
/// 10 Hz pitch and intensity tracks that are non-zero while a word is spoken.
inline Story generate_story(std::size_t sentences, std::uint64_t seed, std::uint64_t lexicon_seed = 2090) {
  Grammar g(lexicon_seed);
  std::mt19937_64 rng(seed);
  Story st;
  st.frequency = g.frequency_table();
  double t = 2.0;
  std::uniform_real_distribution<double> jitter(0.0, 0.08), pause(0.4, 0.8);
  for (std::size_t i = 0; i < sentences; ++i) {
    auto s = g.sentence(rng);
    for (const auto& tok : s.tokens) {
      if (punctuation_token(tok)) continue;
      const double dur = 0.18 + 0.045 * static_cast<double>(tok.size()) + jitter(rng);
      st.alignment.entries.push_back({tok, t, t + dur});
      t += dur + 0.02;
    }
    t += pause(rng);
    st.sentences.push_back(std::move(s.tokens));
  }
  const double period = 0.1;
  const auto samples = static_cast<std::size_t>(std::ceil(t / period)) + 1;
  st.f0.sample_period = st.rms.sample_period = period;
  st.f0.values.assign(samples, 0.0);
  st.rms.values.assign(samples, 0.0);
  std::normal_distribution<double> nz(0.0, 1.0);
  double pitch = 0.0, level = 0.0;
  std::size_t w = 0;
  for (std::size_t k = 0; k < samples; ++k) {
    const double time = static_cast<double>(k) * period;
    pitch = 0.9 * pitch + 0.3 * nz(rng);
    level = 0.8 * level + 0.2 * nz(rng);
    while (w < st.alignment.size() && st.alignment.entries[w].offset < time) ++w;
    const bool speaking = w < st.alignment.size() && st.alignment.entries[w].onset <= time;
    if (speaking) {
      st.f0.values[k] = 120.0 + 15.0 * pitch;
      st.rms.values[k] = 0.5 + 0.1 * level;
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Planted-effect BOLD panels

struct PlantConfig {
  std::size_t subjects = 12;
  std::uint32_t nx = 10, ny = 10, nz = 10;
  double voxel_mm = 2.0;
  std::size_t sections = 9;
  double tr = 2.0;
  double snr = 0.5;  // std of the planted signal over noise std
  std::size_t region_size = 30;
  double noise_sd = 1.0;
  double control_snr = 0.5;  // typical std of the control signal over noise std
  std::uint64_t seed = 7;
};

struct PlantedData {
  std::vector<BoldPanel> subjects;
  std::vector<std::size_t> region;  // sorted voxel indices
};

/// The `size` voxels closest to the grid centre in breadth-first (6-neighbour) order.
inline std::vector<std::size_t> central_region(const VoxelGrid& grid, std::size_t size) {
  std::vector<bool> seen(grid.size(), false);
  std::vector<std::size_t> out;
  std::queue<std::size_t> q;
  const auto c = grid.index(grid.nx / 2, grid.ny / 2, grid.nz / 2);
  q.push(c);
  seen[c] = true;
  while (!q.empty() && out.size() < size) {
    const auto i = q.front();
    q.pop();
    out.push_back(i);
    std::uint32_t x, y, z;
    grid.coords(i, x, y, z);
    const int nb[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (const auto& d : nb) {
      const long X = long(x) + d[0], Y = long(y) + d[1], Z = long(z) + d[2];
      if (X < 0 || Y < 0 || Z < 0 || X >= long(grid.nx) || Y >= long(grid.ny) || Z >= long(grid.nz)) continue;
      const auto j = grid.index(std::uint32_t(X), std::uint32_t(Y), std::uint32_t(Z));
      if (!seen[j]) {
        seen[j] = true;
        q.push(j);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Voxel series = controls x random betas + white noise, plus `effect` scaled to the
/// configured SNR inside the central region.
inline PlantedData plant_experiment(const DesignMatrix& controls, const Eigen::VectorXd& effect, const PlantConfig& cfg) {
  const auto T = static_cast<Eigen::Index>(controls.scans());
  if (effect.size() != T) throw ValidationError("planted effect length differs from the design");
  PlantedData out;
  VoxelGrid grid;
  grid.nx = cfg.nx;
  grid.ny = cfg.ny;
  grid.nz = cfg.nz;
  std::fill(std::begin(grid.voxel_mm), std::end(grid.voxel_mm), cfg.voxel_mm);
  out.region = central_region(grid, cfg.region_size);
  const auto V = static_cast<Eigen::Index>(grid.size());

  auto sd = [](const Eigen::VectorXd& v) { return std::sqrt((v.array() - v.mean()).square().sum() / double(v.size())); };
  const double eff_sd = sd(effect);
  const double beta = eff_sd > 0 ? cfg.snr * cfg.noise_sd / eff_sd : 0.0;
  std::vector<double> col_sd;
  for (Eigen::Index c = 1; c < controls.X.cols(); ++c) col_sd.push_back(sd(controls.X.col(c)));

  std::vector<bool> in_region(grid.size(), false);
  for (auto i : out.region) in_region[i] = true;
  const auto sections = Sections::equal(cfg.sections, controls.scans());

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> nz(0.0, 1.0);
  const double per_col = cfg.control_snr * cfg.noise_sd / std::sqrt(std::max<std::size_t>(1, col_sd.size()));
  for (std::size_t s = 0; s < cfg.subjects; ++s) {
    BoldPanel p;
    p.grid = grid;
    p.tr = cfg.tr;
    p.section_starts.assign(sections.starts.begin(), sections.starts.end());
    p.data.resize(T, V);
    for (Eigen::Index v = 0; v < V; ++v) {
      Eigen::VectorXd y = Eigen::VectorXd::Constant(T, 100.0 + 5.0 * nz(rng));
      for (Eigen::Index c = 1; c < controls.X.cols(); ++c) {
        const double s_c = col_sd[static_cast<std::size_t>(c - 1)];
        if (s_c > 0) y += (per_col * nz(rng) / s_c) * controls.X.col(c);
      }
      if (in_region[static_cast<std::size_t>(v)]) y += beta * effect;
      for (Eigen::Index t = 0; t < T; ++t) y(t) += cfg.noise_sd * nz(rng);
      p.data.col(v) = y;
    }
    out.subjects.push_back(std::move(p));
  }
  return out;
}

}  // namespace synsurp::synthetic
