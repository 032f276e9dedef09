#pragma once

// Word-synchronised ranked-parallel search.
//
// A pool holds every live derivation that has generated the same word prefix.
// advance_word extends each path through any sequence of arc actions followed by
// exactly one Shift, which generates the next word. Nothing is discarded except
// by the engineering cap, so a path ranked low at one word can rank high at the
// next ("retain all, choose the top k at each word").

#include <algorithm>
#include <cmath>
#include <concepts>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synsurp/error.hpp"
#include "synsurp/scoring.hpp"
#include "synsurp/transition_system.hpp"

namespace synsurp {

/// Anything returning the ScoreBundle for (stack top, buffer front).
template <class S>
concept ConfigScorer = requires(const S& s, int top, int front) {
  { s(top, front) } -> std::convertible_to<const ScoreBundle&>;
};

enum class RankKey { syntactic, full };

struct SearchOptions {
  static constexpr std::size_t unlimited = std::numeric_limits<std::size_t>::max();
  std::size_t cap = 10000;
  bool use_labels = true;
  RankKey rank = RankKey::syntactic;
  std::size_t labels = 0;  // label inventory size; 0 = unlabeled actions
};

/// One in-progress derivation. Log-probabilities are base 2.
struct PathItem {
  ParserConfiguration config;
  std::vector<Action> history;
  double logp_syn = 0.0;   // transition, direction (and label) factors
  double logp_full = 0.0;  // logp_syn plus word factors
};

struct WordSyncPool {
  std::size_t word_index = 0;   // words generated so far
  std::vector<PathItem> paths;  // best first
  std::size_t cap = SearchOptions::unlimited;
  RankKey rank = RankKey::syntactic;
  bool cap_bound = false;       // the cap discarded at least one path for this word
};

namespace detail {

inline constexpr double kInvLn2 = 1.0 / std::numbers::ln2;

inline double rank_value(const PathItem& p, RankKey key) { return key == RankKey::syntactic ? p.logp_syn : p.logp_full; }

/// Best first; ties broken by lexicographically smaller history.
inline bool ranks_before(const PathItem& a, const PathItem& b, RankKey key) {
  double ka = rank_value(a, key), kb = rank_value(b, key);
  if (ka != kb) return ka > kb;
  return a.history < b.history;
}

/// Branch-and-bound collection of the best `cap` completions. Factors are
/// probabilities, so a partial path's key bounds every completion below it.
class BoundedCollector {
 public:
  BoundedCollector(std::size_t cap, RankKey key) : cap_(cap), key_(key) {}

  double threshold() const {
    return keys_.size() < cap_ ? -std::numeric_limits<double>::infinity() : keys_.top();
  }

  bool admits(const PathItem& p) const { return rank_value(p, key_) >= threshold(); }

  void add(PathItem p) {
    double k = rank_value(p, key_);
    if (k < threshold()) {
      pruned_ = true;
      return;
    }
    if (cap_ != SearchOptions::unlimited) {
      keys_.push(k);
      if (keys_.size() > cap_) keys_.pop();
    }
    items_.push_back(std::move(p));
  }

  void note_pruned() { pruned_ = true; }

  std::vector<PathItem> take(bool* bound) {
    double t = threshold();
    std::erase_if(items_, [&](const PathItem& p) { return rank_value(p, key_) < t; });
    std::sort(items_.begin(), items_.end(), [&](const PathItem& a, const PathItem& b) { return ranks_before(a, b, key_); });
    if (items_.size() > cap_) {
      items_.resize(cap_);
      pruned_ = true;
    }
    if (bound) *bound = pruned_;
    return std::move(items_);
  }

 private:
  std::size_t cap_;
  RankKey key_;
  std::priority_queue<double, std::vector<double>, std::greater<>> keys_;
  std::vector<PathItem> items_;
  bool pruned_ = false;
};

/// Arc actions legal at `c`, expanded over labels when labels participate.
inline std::vector<Action> arc_actions(const ParserConfiguration& c, const SearchOptions& opt) {
  std::vector<Action> out;
  const auto legal = legal_actions(c);
  for (ActionKind k : {ActionKind::LeftArc, ActionKind::RightArc}) {
    if (!legal.contains(k)) continue;
    if (opt.use_labels && opt.labels > 0)
      for (std::size_t l = 0; l < opt.labels; ++l) out.push_back({k, static_cast<int>(l)});
    else
      out.push_back({k, -1});
  }
  return out;
}

inline PathItem extend(const PathItem& p, Action a, double log_factor_syn, double log_factor_word) {
  PathItem q;
  q.config = apply(p.config, a);
  q.history = p.history;
  q.history.push_back(a);
  q.logp_syn = p.logp_syn + log_factor_syn * kInvLn2;
  q.logp_full = p.logp_full + (log_factor_syn + log_factor_word) * kInvLn2;
  return q;
}

}  // namespace detail

/// Pool after the first word: the initial configuration, with the first word drawn
/// from the (empty stack, BOS) scores.
template <ConfigScorer Scorer>
WordSyncPool initial_pool(int sentence_length, int first_word, const Scorer& scorer, const SearchOptions& opt = {}) {
  WordSyncPool pool;
  pool.word_index = 1;
  pool.cap = opt.cap;
  pool.rank = opt.rank;
  PathItem p;
  p.config = initial_config(sentence_length);
  p.logp_full = log_word_factor(scorer(0, 0), first_word, true) * detail::kInvLn2;
  pool.paths.push_back(std::move(p));
  return pool;
}

/// Extends every path through arc actions and one Shift generating `next_word`.
template <ConfigScorer Scorer>
WordSyncPool advance_word(const WordSyncPool& pool, int next_word, const Scorer& scorer, const SearchOptions& opt = {}) {
  if (pool.paths.empty()) throw ContractViolation("advance_word: empty pool");
  detail::BoundedCollector out(opt.cap, opt.rank);

  std::function<void(const PathItem&)> expand = [&](const PathItem& p) {
    const auto& c = p.config;
    const auto legal = legal_actions(c);
    if (!legal.shift) throw ContractViolation("advance_word: no words left to generate in " + c.describe());
    const ScoreBundle& s = scorer(c.top(), c.buffer_front());
    out.add(detail::extend(p, Action::shift(), log_action_factor(s, legal, Action::shift(), opt.use_labels),
                           log_word_factor(s, next_word, false)));
    for (const Action& a : detail::arc_actions(c, opt)) {
      PathItem q = detail::extend(p, a, log_action_factor(s, legal, a, opt.use_labels), 0.0);
      if (out.admits(q))
        expand(q);
      else
        out.note_pruned();
    }
  };
  for (const auto& p : pool.paths) {
    if (p.config.buffer_front() >= p.config.sentence_length())
      throw ContractViolation("advance_word: all words already generated in " + p.config.describe());
    if (!out.admits(p)) {
      out.note_pruned();
      continue;
    }
    expand(p);
  }

  WordSyncPool next;
  next.word_index = pool.word_index + 1;
  next.cap = opt.cap;
  next.rank = opt.rank;
  next.paths = out.take(&next.cap_bound);
  if (next.paths.empty()) throw Error("advance_word: no continuation survived");
  return next;
}

struct FinalParse {
  DependencyTree tree;
  std::vector<Action> history;
  double logp_syn = 0.0;
  double logp_full = 0.0;
};

/// Completes every path: remaining arc actions, the Shift generating end-of-sentence,
/// and the root attachment. Results are ranked by logp_full.
template <ConfigScorer Scorer>
std::vector<FinalParse> finalize(const WordSyncPool& pool, const Scorer& scorer, const SearchOptions& opt = {},
                                 bool* cap_bound = nullptr) {
  detail::BoundedCollector out(opt.cap, RankKey::full);
  std::function<void(const PathItem&)> expand = [&](const PathItem& p) {
    const auto& c = p.config;
    if (is_terminal(c)) {
      out.add(p);
      return;
    }
    const auto legal = legal_actions(c);
    const ScoreBundle& s = scorer(c.top(), c.buffer_front());
    if (legal.shift) {
      int eos = s.eos();
      bool last = c.buffer_front() == c.sentence_length();
      if (last) {
        PathItem q = detail::extend(p, Action::shift(), log_action_factor(s, legal, Action::shift(), opt.use_labels),
                                    log_word_factor(s, eos, false));
        if (out.admits(q))
          expand(q);
        else
          out.note_pruned();
      }
    }
    for (const Action& a : detail::arc_actions(c, opt)) {
      PathItem q = detail::extend(p, a, log_action_factor(s, legal, a, opt.use_labels), 0.0);
      if (out.admits(q))
        expand(q);
      else
        out.note_pruned();
    }
  };
  for (const auto& p : pool.paths) {
    if (p.config.buffer_front() < p.config.sentence_length())
      throw ContractViolation("finalize: not all words have been generated");
    expand(p);
  }
  auto done = out.take(cap_bound);
  std::vector<FinalParse> result;
  result.reserve(done.size());
  for (auto& p : done) result.push_back({p.config.tree(), std::move(p.history), p.logp_syn, p.logp_full});
  return result;
}

/// Sum of 2^logp_syn over the first min(k, |paths|) ranked paths.
inline double top_k_mass(const WordSyncPool& pool, std::size_t k) {
  if (pool.paths.empty()) throw ContractViolation("top_k_mass: empty pool");
  if (k < 1) throw ContractViolation("top_k_mass: k must be >= 1");
  double m = 0.0;
  for (std::size_t r = 0; r < std::min(k, pool.paths.size()); ++r) m += std::exp2(pool.paths[r].logp_syn);
  return m;
}

/// Same ranked prefix as top_k_mass, summing 2^logp_full.
inline double top_k_full_mass(const WordSyncPool& pool, std::size_t k) {
  if (pool.paths.empty()) throw ContractViolation("top_k_full_mass: empty pool");
  if (k < 1) throw ContractViolation("top_k_full_mass: k must be >= 1");
  double m = 0.0;
  for (std::size_t r = 0; r < std::min(k, pool.paths.size()); ++r) m += std::exp2(pool.paths[r].logp_full);
  return m;
}

/// Runs the pool search over a whole sentence, returning the pool after each word.
template <ConfigScorer Scorer>
std::vector<WordSyncPool> pool_trajectory(std::span<const int> words, const Scorer& scorer, const SearchOptions& opt = {}) {
  std::vector<WordSyncPool> pools;
  if (words.empty()) return pools;
  pools.push_back(initial_pool(static_cast<int>(words.size()), words[0], scorer, opt));
  for (std::size_t i = 1; i < words.size(); ++i) pools.push_back(advance_word(pools.back(), words[i], scorer, opt));
  return pools;
}

/// JSON line for the per-word trace: word_index, pool_size, top_mass[1..K], cap_bound.
inline nlohmann::json pool_trace(const WordSyncPool& pool, std::size_t max_k) {
  nlohmann::json j;
  j["word_index"] = pool.word_index;
  j["pool_size"] = pool.paths.size();
  std::vector<double> masses;
  for (std::size_t k = 1; k <= std::min(max_k, pool.paths.size()); ++k) masses.push_back(top_k_mass(pool, k));
  j["top_mass"] = masses;
  j["cap_bound"] = pool.cap_bound;
  return j;
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration (correctness oracle at small n)

struct Derivation {
  std::vector<Action> actions;
  DependencyTree tree;
  double logp_syn = 0.0;
  double logp_full = 0.0;
};

/// Every complete derivation of `words` with its probabilities, in lexicographic action order.
template <ConfigScorer Scorer>
std::vector<Derivation> exhaustive_parse(std::span<const int> words, const Scorer& scorer, const SearchOptions& opt = {},
                                         std::size_t max_n = 10) {
  if (words.empty()) throw ContractViolation("exhaustive_parse: empty sentence");
  if (words.size() > max_n)
    throw ContractViolation("exhaustive_parse: sentence of " + std::to_string(words.size()) +
                            " tokens exceeds max_n = " + std::to_string(max_n) +
                            "; use pool search (advance_word / finalize) instead");
  const int n = static_cast<int>(words.size());
  std::vector<Derivation> out;
  PathItem start;
  start.config = initial_config(n);
  start.logp_full = log_word_factor(scorer(0, 0), words[0], true) * detail::kInvLn2;

  std::function<void(const PathItem&)> dfs = [&](const PathItem& p) {
    const auto& c = p.config;
    if (is_terminal(c)) {
      out.push_back({p.history, c.tree(), p.logp_syn, p.logp_full});
      return;
    }
    const auto legal = legal_actions(c);
    const ScoreBundle& s = scorer(c.top(), c.buffer_front());
    if (legal.shift) {
      int j = c.buffer_front();
      int w = j < n ? words[static_cast<std::size_t>(j)] : s.eos();
      dfs(detail::extend(p, Action::shift(), log_action_factor(s, legal, Action::shift(), opt.use_labels),
                         log_word_factor(s, w, false)));
    }
    for (const Action& a : detail::arc_actions(c, opt)) dfs(detail::extend(p, a, log_action_factor(s, legal, a, opt.use_labels), 0.0));
  };
  dfs(start);
  return out;
}

// ---------------------------------------------------------------------------
// Greedy 1-best decoding

/// Picks the most probable structural action at each step (label argmax for arcs).
template <ConfigScorer Scorer>
FinalParse greedy_parse(std::span<const int> words, const Scorer& scorer, bool use_labels = true) {
  if (words.empty()) throw ContractViolation("greedy_parse: empty sentence");
  const int n = static_cast<int>(words.size());
  PathItem p;
  p.config = initial_config(n);
  p.logp_full = log_word_factor(scorer(0, 0), words[0], true) * detail::kInvLn2;
  while (!is_terminal(p.config)) {
    const auto& c = p.config;
    const auto legal = legal_actions(c);
    const ScoreBundle& s = scorer(c.top(), c.buffer_front());
    int best_label = -1;
    if (use_labels && !s.label_dist.empty())
      best_label = static_cast<int>(std::max_element(s.label_dist.begin(), s.label_dist.end()) - s.label_dist.begin());
    Action best = Action::shift();
    double best_lp = -std::numeric_limits<double>::infinity();
    for (ActionKind k : {ActionKind::Shift, ActionKind::LeftArc, ActionKind::RightArc}) {
      if (!legal.contains(k)) continue;
      Action a{k, k == ActionKind::Shift ? -1 : best_label};
      double lp = log_action_factor(s, legal, Action{k, -1}, false);
      if (lp > best_lp) {
        best_lp = lp;
        best = a;
      }
    }
    double word_lp = 0.0;
    if (best.kind == ActionKind::Shift) {
      int j = c.buffer_front();
      word_lp = log_word_factor(s, j < n ? words[static_cast<std::size_t>(j)] : s.eos(), false);
    }
    p = detail::extend(p, best, log_action_factor(s, legal, best, use_labels), word_lp);
  }
  return {p.config.tree(), std::move(p.history), p.logp_syn, p.logp_full};
}

/// Per-step base-2 log-probabilities of a derivation (structural plus word factor),
/// for the JSON-lines debugging trace.
template <ConfigScorer Scorer>
std::vector<std::pair<Action, double>> derivation_steps(std::span<const int> words, std::span<const Action> history,
                                                        const Scorer& scorer, bool use_labels = true) {
  const int n = static_cast<int>(words.size());
  std::vector<std::pair<Action, double>> steps;
  auto c = initial_config(n);
  for (const Action& a : history) {
    const auto legal = legal_actions(c);
    const ScoreBundle& s = scorer(c.top(), c.buffer_front());
    double lp = log_action_factor(s, legal, a, use_labels);
    if (a.kind == ActionKind::Shift) {
      int j = c.buffer_front();
      lp += log_word_factor(s, j < n ? words[static_cast<std::size_t>(j)] : s.eos(), false);
    }
    steps.emplace_back(a, lp * detail::kInvLn2);
    c = apply(c, a);
  }
  return steps;
}

// ---------------------------------------------------------------------------
// Hand-specified scores (fixtures and small experiments)

/// Scores looked up by (stack top, buffer front), with a fallback bundle.
class TableScorer {
 public:
  explicit TableScorer(ScoreBundle fallback) : fallback_(std::move(fallback)) {}

  TableScorer& set(int top, int front, ScoreBundle s) {
    table_[{top, front}] = std::move(s);
    return *this;
  }

  const ScoreBundle& operator()(int top, int front) const {
    auto it = table_.find({top, front});
    return it == table_.end() ? fallback_ : it->second;
  }

 private:
  ScoreBundle fallback_;
  std::map<std::pair<int, int>, ScoreBundle> table_;
};

/// Bundle with the given structural probabilities and uniform word/label distributions.
inline ScoreBundle make_bundle(double p_shift, double p_left, std::size_t word_classes = 2, std::size_t labels = 0) {
  ScoreBundle s;
  s.p_shift = p_shift;
  s.p_reduce = 1.0 - p_shift;
  s.p_left = p_left;
  s.p_right = 1.0 - p_left;
  s.word_dist.assign(word_classes + 1, 1.0 / static_cast<double>(word_classes + 1));
  if (labels) s.label_dist.assign(labels, 1.0 / static_cast<double>(labels));
  return s;
}

/// A score table read from JSON, with the word classes its word ids refer to.
///
///   {"word_classes": ["a", "b"], "labels": ["dep", "root"],
///    "default": {"p_shift": 0.5, "p_left": 0.5},
///    "entries": [{"top": 1, "front": 2, "p_shift": 0.55, "p_left": 0.5,
///                 "word_dist": [..., eos], "label_dist": [...]}]}
///
/// Omitted distributions are uniform. Probabilities must lie in [0, 1] and each
/// distribution must sum to 1 within 1e-6.
struct ScoreTable {
  TableScorer scorer{ScoreBundle{}};
  std::vector<std::string> word_classes;
  std::vector<std::string> labels;

  int word_id(const std::string& w) const {
    auto it = std::find(word_classes.begin(), word_classes.end(), w);
    if (it == word_classes.end()) throw LookupError("word '" + w + "' is not a class of the score table");
    return static_cast<int>(it - word_classes.begin());
  }
};

namespace detail {

inline ScoreBundle bundle_from_json(const nlohmann::json& j, std::size_t words, std::size_t labels) {
  auto prob = [&](const char* key) {
    double p = j.value(key, 0.5);
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError(std::string("score table: ") + key + " outside [0, 1]");
    return p;
  };
  ScoreBundle s = make_bundle(prob("p_shift"), prob("p_left"), words, labels);
  auto dist = [](const nlohmann::json& v, std::vector<double>& out, const char* what) {
    auto d = v.get<std::vector<double>>();
    if (d.size() != out.size())
      throw ValidationError(std::string("score table: ") + what + " has " + std::to_string(d.size()) +
                            " entries, expected " + std::to_string(out.size()));
    double z = 0.0;
    for (double p : d) {
      if (!(p >= 0.0)) throw ValidationError(std::string("score table: negative entry in ") + what);
      z += p;
    }
    if (std::abs(z - 1.0) > 1e-6) throw ValidationError(std::string("score table: ") + what + " does not sum to 1");
    out = std::move(d);
  };
  if (j.contains("word_dist")) dist(j["word_dist"], s.word_dist, "word_dist");
  if (j.contains("label_dist")) dist(j["label_dist"], s.label_dist, "label_dist");
  return s;
}

}  // namespace detail

inline ScoreTable score_table_from_json(const nlohmann::json& j) {
  ScoreTable t;
  try {
    t.word_classes = j.at("word_classes").get<std::vector<std::string>>();
    t.labels = j.value("labels", std::vector<std::string>{});
    if (t.word_classes.empty()) throw ValidationError("score table: word_classes is empty");
    const auto W = t.word_classes.size(), L = t.labels.size();
    t.scorer = TableScorer(detail::bundle_from_json(j.value("default", nlohmann::json::object()), W, L));
    for (const auto& e : j.value("entries", nlohmann::json::array()))
      t.scorer.set(e.at("top").get<int>(), e.at("front").get<int>(), detail::bundle_from_json(e, W, L));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("score table: ") + e.what());
  }
  return t;
}

inline ScoreTable load_score_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LookupError("cannot open score table " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return score_table_from_json(j);
}

}  // namespace synsurp
