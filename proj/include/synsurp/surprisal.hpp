#pragma once

// Per-word surprisal from pool trajectories, in bits.
//
//   syntactic  SynS_k(w_i) = -log2( M_k(i) / M_k(i-1) ), M_k = top-k mass of
//              transition-only path probabilities (ratio of sums)
//   full       same ratio over the joint path-and-word probabilities of the
//              same ranked paths
//   lexical    full - syntactic
//
// The first word of a sentence divides by 1 (the empty derivation). Negative
// values are reported as computed.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "synsurp/csv.hpp"
#include "synsurp/error.hpp"
#include "synsurp/path_search.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp {

/// log2 of the summed 2^logp over the first min(k, |paths|) ranked paths.
inline double log2_top_k_mass(const WordSyncPool& pool, std::size_t k, bool full) {
  if (pool.paths.empty()) throw ContractViolation("empty pool");
  if (k < 1) throw ContractViolation("k must be >= 1");
  const std::size_t m = std::min(k, pool.paths.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < m; ++r) mx = std::max(mx, full ? pool.paths[r].logp_full : pool.paths[r].logp_syn);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (std::size_t r = 0; r < m; ++r) acc += std::exp2((full ? pool.paths[r].logp_full : pool.paths[r].logp_syn) - mx);
  return mx + std::log2(acc);
}

namespace detail {

inline std::vector<double> surprisal_from_pools(std::span<const WordSyncPool> pools, std::size_t k, bool full) {
  std::vector<double> out;
  out.reserve(pools.size());
  double prev = 0.0;
  for (std::size_t i = 0; i < pools.size(); ++i) {
    double cur = log2_top_k_mass(pools[i], k, full);
    if (!std::isfinite(cur))
      throw Error("zero top-" + std::to_string(k) + " mass at word " + std::to_string(i + 1));
    out.push_back(prev - cur);
    prev = cur;
  }
  return out;
}

}  // namespace detail

/// SynS_k for each word of one sentence's trajectory.
inline std::vector<double> syn_surprisal(std::span<const WordSyncPool> pools, std::size_t k) {
  return detail::surprisal_from_pools(pools, k, false);
}

inline std::vector<double> full_surprisal(std::span<const WordSyncPool> pools, std::size_t k) {
  return detail::surprisal_from_pools(pools, k, true);
}

inline std::vector<double> lex_surprisal(std::span<const WordSyncPool> pools, std::size_t k) {
  auto full = full_surprisal(pools, k);
  auto syn = syn_surprisal(pools, k);
  for (std::size_t i = 0; i < full.size(); ++i) full[i] -= syn[i];
  return full;
}

// ---------------------------------------------------------------------------
// Series

struct WordSurprisal {
  std::size_t word_index = 0;  // 1-based over the whole text
  std::size_t sentence = 0;
  std::string word;
  std::optional<double> offset;
  std::vector<double> syn;   // one entry per configured k
  std::vector<double> full;
  std::vector<double> lex;
};

struct SurprisalSeries {
  std::vector<std::size_t> k_list;
  std::vector<WordSurprisal> words;
  bool cap_bound = false;  // the pool cap discarded paths somewhere

  std::size_t k_index(std::size_t k) const {
    auto it = std::find(k_list.begin(), k_list.end(), k);
    if (it == k_list.end()) throw ContractViolation("k = " + std::to_string(k) + " not in the series");
    return static_cast<std::size_t>(it - k_list.begin());
  }

  std::vector<double> syn(std::size_t k) const {
    std::vector<double> v;
    const auto idx = k_index(k);
    for (const auto& w : words) v.push_back(w.syn[idx]);
    return v;
  }
};

/// Parses one sentence and appends its words to `series`. Only the previous pool is
/// kept in memory.
template <ConfigScorer Scorer>
void append_sentence(SurprisalSeries& series, const std::vector<std::string>& surface, std::span<const int> words,
                     const Scorer& scorer, const SearchOptions& opt, std::size_t sentence_index = 0) {
  if (words.empty()) return;
  const std::size_t base = series.words.size();
  std::vector<double> prev_syn(series.k_list.size(), 0.0), prev_full(series.k_list.size(), 0.0);
  WordSyncPool pool;
  for (std::size_t i = 0; i < words.size(); ++i) {
    pool = i == 0 ? initial_pool(static_cast<int>(words.size()), words[0], scorer, opt)
                  : advance_word(pool, words[i], scorer, opt);
    series.cap_bound |= pool.cap_bound;
    WordSurprisal w;
    w.word_index = base + i + 1;
    w.sentence = sentence_index;
    w.word = i < surface.size() ? surface[i] : std::string();
    for (std::size_t kk = 0; kk < series.k_list.size(); ++kk) {
      double s = log2_top_k_mass(pool, series.k_list[kk], false);
      double f = log2_top_k_mass(pool, series.k_list[kk], true);
      if (!std::isfinite(s) || !std::isfinite(f))
        throw Error("zero top-k mass at word " + std::to_string(w.word_index));
      w.syn.push_back(prev_syn[kk] - s);
      w.full.push_back(prev_full[kk] - f);
      w.lex.push_back(w.full.back() - w.syn.back());
      prev_syn[kk] = s;
      prev_full[kk] = f;
    }
    series.words.push_back(std::move(w));
  }
}

// ---------------------------------------------------------------------------
// Alignment to stimulus word offsets

namespace detail {

inline bool is_punctuation_only(std::string_view tok) {
  if (tok.empty()) return true;
  return std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return c < 0x80 && std::ispunct(c); });
}

inline std::string normalise_word(std::string_view w) {
  std::string out;
  for (unsigned char c : w) {
    if (c >= 0x80)
      out.push_back(static_cast<char>(c));
    else if (std::isalnum(c))
      out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

}  // namespace detail

/// Index into `series.words` for each alignment entry. Punctuation-only tokens are
/// skipped; the remaining tokens must match the alignment words one-to-one after
/// lower-casing and removing non-alphanumeric ASCII characters.
inline std::vector<std::size_t> match_alignment(const SurprisalSeries& series, const StimulusAlignment& alignment) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < series.words.size(); ++i)
    if (!detail::is_punctuation_only(series.words[i].word)) idx.push_back(i);
  const std::size_t common = std::min(idx.size(), alignment.size());
  for (std::size_t a = 0; a < common; ++a) {
    const auto& tok = series.words[idx[a]].word;
    if (detail::normalise_word(tok) != detail::normalise_word(alignment.entries[a].word))
      throw AlignmentError("token/word mismatch at alignment index " + std::to_string(a) + ": parser token '" + tok +
                           "' vs stimulus word '" + alignment.entries[a].word + "'");
  }
  if (idx.size() != alignment.size())
    throw AlignmentError("length mismatch: " + std::to_string(idx.size()) + " parser words vs " +
                         std::to_string(alignment.size()) + " aligned words; first divergent index " +
                         std::to_string(common));
  return idx;
}

struct RegressorRow {
  double offset = 0.0;
  double value = 0.0;
};

/// (word offset, SynS_k) rows in time order.
inline std::vector<RegressorRow> emit_regressor(const SurprisalSeries& series, const StimulusAlignment& alignment,
                                                std::size_t k) {
  const auto kk = series.k_index(k);
  const auto idx = match_alignment(series, alignment);
  std::vector<RegressorRow> rows;
  rows.reserve(idx.size());
  for (std::size_t a = 0; a < idx.size(); ++a) rows.push_back({alignment.entries[a].offset, series.words[idx[a]].syn[kk]});
  return rows;
}

/// CSV with header `offset,value`.
inline void write_regressor_csv(const std::string& path, const std::vector<RegressorRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "offset,value\n";
  for (const auto& r : rows) out << csv::format(r.offset) << ',' << csv::format(r.value) << '\n';
}

inline std::vector<RegressorRow> read_regressor_csv(const std::string& path) {
  auto table = csv::read(path, {"offset", "value"});
  std::vector<RegressorRow> rows;
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    rows.push_back({csv::to_double(table.rows[r][0], table.lines[r]), csv::to_double(table.rows[r][1], table.lines[r])});
  return rows;
}

/// Combined export: `offset,syn_k1,syn_k5,full_k1,lex_k1,full_k5,lex_k5`
/// (one syn column per k, then a full/lex pair per k).
inline void write_multi_k_csv(const std::string& path, const SurprisalSeries& series, const StimulusAlignment& alignment) {
  const auto idx = match_alignment(series, alignment);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "offset";
  for (auto k : series.k_list) out << ",syn_k" << k;
  for (auto k : series.k_list) out << ",full_k" << k << ",lex_k" << k;
  out << '\n';
  for (std::size_t a = 0; a < idx.size(); ++a) {
    const auto& w = series.words[idx[a]];
    out << csv::format(alignment.entries[a].offset);
    for (std::size_t kk = 0; kk < series.k_list.size(); ++kk) out << ',' << csv::format(w.syn[kk]);
    for (std::size_t kk = 0; kk < series.k_list.size(); ++kk)
      out << ',' << csv::format(w.full[kk]) << ',' << csv::format(w.lex[kk]);
    out << '\n';
  }
}

/// Per-token series without alignment: `word_index,sentence,word,syn,full,lex` for one k.
inline void write_series_csv(const std::string& path, const SurprisalSeries& series, std::size_t k) {
  const auto kk = series.k_index(k);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "word_index,sentence,word,syn,full,lex\n";
  for (const auto& w : series.words)
    out << w.word_index << ',' << w.sentence << ',' << csv::quote(w.word) << ',' << csv::format(w.syn[kk]) << ','
        << csv::format(w.full[kk]) << ',' << csv::format(w.lex[kk]) << '\n';
}

}  // namespace synsurp
