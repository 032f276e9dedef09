#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "support.hpp"
#include "synsurp/pipeline.hpp"
#include "synsurp/surprisal.hpp"
#include "synsurp/synthetic.hpp"
#include "synsurp/trainer.hpp"

using namespace synsurp;
using testing_support::random_table;
using synthetic::generate_treebank;
using synthetic::punctuation_token;

namespace {

SearchOptions exact(RankKey rank = RankKey::syntactic) {
  SearchOptions o;
  o.cap = SearchOptions::unlimited;
  o.use_labels = false;
  o.rank = rank;
  return o;
}

std::vector<int> random_words(int n, int classes, std::mt19937_64& rng) {
  std::vector<int> w(static_cast<std::size_t>(n));
  for (auto& x : w) x = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
  return w;
}

std::size_t largest_pool(const std::vector<WordSyncPool>& pools) {
  std::size_t m = 0;
  for (const auto& p : pools) m = std::max(m, p.paths.size());
  return m;
}

SurprisalSeries series_for(const std::vector<std::string>& surface, const std::vector<int>& words,
                           const TableScorer& t, std::vector<std::size_t> ks) {
  SurprisalSeries s;
  s.k_list = std::move(ks);
  append_sentence(s, surface, std::span<const int>(words), t, exact());
  return s;
}

StimulusAlignment alignment(std::vector<std::pair<std::string, double>> words) {
  StimulusAlignment a;
  for (auto& [w, off] : words) a.entries.push_back({w, off - 0.2, off});
  return a;
}

}  // namespace

TEST(SynSurprisal, TwoPathFragmentValues) {
  auto f = testing_support::two_path_fragment();
  auto after = advance_word(f.before, f.words[2], f.scorer, exact());
  std::vector<WordSyncPool> pools{f.before, after};
  const double s1 = syn_surprisal(pools, 1)[1];
  const double s2 = syn_surprisal(pools, 2)[1];
  EXPECT_NEAR(s1, -std::log2(0.546 / 0.99), 1e-12);
  EXPECT_NEAR(s1, 0.86, 0.005);
  EXPECT_NEAR(s2, 0.0, 1e-12);
}

TEST(SynSurprisal, HalfProbabilityIsOneBit) {
  TableScorer t(make_bundle(0.5, 0.5, 2));
  std::vector<int> w{0, 0, 0};
  auto pools = pool_trajectory(std::span<const int>(w), t, exact());
  auto s = syn_surprisal(pools, 1);
  EXPECT_DOUBLE_EQ(s[0], 0.0);
  EXPECT_DOUBLE_EQ(s[1], 0.0);
  EXPECT_DOUBLE_EQ(s[2], 1.0);
}

TEST(SynSurprisal, ZeroWhenKCoversEveryPath) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 8);
    Model m(testing_support::small_dims(4, 2), rng(), 1.5);
    auto w = random_words(n, 4, rng);
    ModelScorer scorer(m, encode_prefix(m, w, true));
    auto pools = pool_trajectory(std::span<const int>(w), scorer, exact());
    for (double v : syn_surprisal(pools, largest_pool(pools))) EXPECT_NEAR(v, 0.0, 1e-6) << "n=" << n;
  }
}

TEST(SynSurprisal, ForcedShiftsGiveZeroAtEveryK) {
  std::mt19937_64 rng(5);
  auto t = random_table(2, 3, 0, rng);
  std::vector<int> w{2, 1};
  auto pools = pool_trajectory(std::span<const int>(w), t, exact());
  for (std::size_t k : {1u, 2u, 10u})
    for (double v : syn_surprisal(pools, k)) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(SynSurprisal, NonNegativeUnderSyntacticRanking) {
  // The top-k successors descend from at most k distinct parents, whose mass is
  // bounded by the previous top-k mass.
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 6);
    auto t = random_table(n, 3, 0, rng);
    auto w = random_words(n, 3, rng);
    auto pools = pool_trajectory(std::span<const int>(w), t, exact());
    for (std::size_t k : {1u, 2u, 3u, 5u})
      for (double v : syn_surprisal(pools, k)) EXPECT_GE(v, -1e-12);
  }
}

TEST(SynSurprisal, RejoinUnderFullRankingIsNegative) {
  auto t = testing_support::rejoin_table();
  const auto& w = testing_support::rejoin_words();
  auto pools = pool_trajectory(std::span<const int>(w), t, exact(RankKey::full));
  const auto& second = pools[2].paths[1].history;
  const auto& best = pools[3].paths[0].history;
  ASSERT_GT(best.size(), second.size());
  EXPECT_TRUE(std::equal(second.begin(), second.end(), best.begin()));
  const double s = syn_surprisal(pools, 1)[3];
  EXPECT_LT(s, 0.0);
  EXPECT_NEAR(s, -std::log2(0.594 / 0.4), 1e-9);
}

TEST(SynSurprisal, DependsOnlyOnRankedPrefix) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 3);
    auto t = random_table(n, 2, 0, rng);
    auto w = random_words(n, 2, rng);
    auto pools = pool_trajectory(std::span<const int>(w), t, exact());
    const std::size_t k = 2;
    auto base = syn_surprisal(pools, k);
    // Push every path ranked below k further down; the ranking is unchanged.
    auto altered = pools;
    for (auto& p : altered)
      for (std::size_t r = k; r < p.paths.size(); ++r) p.paths[r].logp_syn -= 3.0;
    auto after = syn_surprisal(altered, k);
    for (std::size_t i = 0; i < base.size(); ++i) EXPECT_DOUBLE_EQ(after[i], base[i]);
    const std::size_t big = largest_pool(pools);
    if (pools.back().paths.size() > k) {
      auto wide_before = syn_surprisal(pools, big);
      auto wide_after = syn_surprisal(altered, big);
      EXPECT_NE(wide_before.back(), wide_after.back());
    }
  }
}

TEST(SynSurprisal, ZeroMassNamesTheWord) {
  TableScorer t(make_bundle(0.5, 0.5, 2));
  std::vector<int> w{0, 0, 0};
  auto pools = pool_trajectory(std::span<const int>(w), t, exact());
  for (auto& p : pools[1].paths) p.logp_syn = -std::numeric_limits<double>::infinity();
  try {
    syn_surprisal(pools, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("word 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(syn_surprisal(pools, 0), ContractViolation);
}

TEST(FullSurprisal, DeterministicTransitionsGiveUnigramSurprisal) {
  auto b = make_bundle(1.0, 0.5, 3);
  b.word_dist = {0.5, 0.25, 0.125, 0.125};
  TableScorer t(b);
  std::vector<int> w{1, 0, 2, 2, 0};
  auto pools = pool_trajectory(std::span<const int>(w), t, exact());
  for (std::size_t k : {1u, 50u}) {
    auto full = full_surprisal(pools, k);
    auto syn = syn_surprisal(pools, k);
    EXPECT_NEAR(full[0], -std::log2(0.25 / 0.875), 1e-12);
    for (std::size_t i = 1; i < w.size(); ++i) {
      EXPECT_NEAR(full[i], -std::log2(b.word_dist[static_cast<std::size_t>(w[i])]), 1e-12);
      EXPECT_NEAR(syn[i], 0.0, 1e-12);
    }
  }
}

TEST(FullSurprisal, NonNegativeAtUnlimitedCap) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 6);
    auto t = random_table(n, 3, 0, rng);
    auto w = random_words(n, 3, rng);
    auto by_full = pool_trajectory(std::span<const int>(w), t, exact(RankKey::full));
    for (std::size_t k : {1u, 3u})
      for (double v : full_surprisal(by_full, k)) EXPECT_GE(v, -1e-12);
    auto by_syn = pool_trajectory(std::span<const int>(w), t, exact());
    for (double v : full_surprisal(by_syn, largest_pool(by_syn))) EXPECT_GE(v, -1e-12);
  }
}

TEST(FullSurprisal, ZeroWordProbabilityNamesTheWord) {
  auto b = make_bundle(0.5, 0.5, 2);
  b.word_dist = {1.0, 0.0, 0.0};
  TableScorer t(b);
  std::vector<int> w{0, 0, 1};
  auto pools = pool_trajectory(std::span<const int>(w), t, exact());
  try {
    full_surprisal(pools, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("word 3"), std::string::npos) << e.what();
  }
}

TEST(Decomposition, FullIsLexPlusSyn) {
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 6);
    auto t = random_table(n, 3, 0, rng);
    auto w = random_words(n, 3, rng);
    auto pools = pool_trajectory(std::span<const int>(w), t, exact());
    for (std::size_t k : {1u, 2u, 5u}) {
      auto full = full_surprisal(pools, k), syn = syn_surprisal(pools, k), lex = lex_surprisal(pools, k);
      for (std::size_t i = 0; i < full.size(); ++i) {
        EXPECT_EQ(full[i] - syn[i], lex[i]);
        EXPECT_TRUE(std::isfinite(full[i]) && std::isfinite(syn[i]));
      }
    }
  }
}

TEST(Series, AppendSentenceMatchesTrajectory) {
  std::mt19937_64 rng(3);
  SurprisalSeries s;
  s.k_list = {1, 5};
  std::vector<std::vector<int>> sentences;
  std::vector<TableScorer> tables;
  for (int i = 0; i < 3; ++i) {
    const int n = 2 + static_cast<int>(rng() % 5);
    sentences.push_back(random_words(n, 3, rng));
    tables.push_back(random_table(n, 3, 0, rng));
  }
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    std::vector<std::string> surface(sentences[i].size(), "x");
    append_sentence(s, surface, std::span<const int>(sentences[i]), tables[i], exact(), i);
  }
  std::size_t pos = 0;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    auto pools = pool_trajectory(std::span<const int>(sentences[i]), tables[i], exact());
    for (std::size_t kk = 0; kk < s.k_list.size(); ++kk) {
      auto syn = syn_surprisal(pools, s.k_list[kk]);
      auto full = full_surprisal(pools, s.k_list[kk]);
      for (std::size_t j = 0; j < syn.size(); ++j) {
        const auto& w = s.words[pos + j];
        EXPECT_EQ(w.sentence, i);
        EXPECT_EQ(w.word_index, pos + j + 1);
        EXPECT_NEAR(w.syn[kk], syn[j], 1e-12);
        EXPECT_NEAR(w.full[kk], full[j], 1e-12);
        EXPECT_EQ(w.lex[kk], w.full[kk] - w.syn[kk]);
      }
    }
    pos += sentences[i].size();
  }
  EXPECT_EQ(s.words.size(), pos);
  EXPECT_FALSE(s.cap_bound);
  EXPECT_EQ(s.syn(5).size(), pos);
  EXPECT_THROW(s.syn(3), ContractViolation);
}

TEST(Alignment, SkipsPunctuationAndNormalises) {
  TableScorer t(make_bundle(0.5, 0.5, 2));
  auto s = series_for({"The", "dog", ",", "barked", "."}, {0, 1, 0, 1, 0}, t, {1});
  auto idx = match_alignment(s, alignment({{"the", 0.5}, {"Dog", 1.0}, {"barked.", 1.8}}));
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 3}));
}

TEST(Alignment, MismatchReportsIndex) {
  TableScorer t(make_bundle(0.5, 0.5, 2));
  auto s = series_for({"The", "dog", "barked"}, {0, 1, 0}, t, {1});
  try {
    match_alignment(s, alignment({{"the", 0.5}, {"cat", 1.0}, {"barked", 1.8}}));
    FAIL();
  } catch (const AlignmentError& e) {
    EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos) << e.what();
  }
  try {
    match_alignment(s, alignment({{"the", 0.5}, {"dog", 1.0}, {"barked", 1.8}, {"loudly", 2.4}}));
    FAIL();
  } catch (const AlignmentError& e) {
    EXPECT_NE(std::string(e.what()).find("first divergent index 3"), std::string::npos) << e.what();
  }
}

TEST(Regressor, ThreeWordsInTimeOrderAndRoundTrip) {
  TableScorer t(make_bundle(0.3, 0.5, 2));
  auto s = series_for({"a", "b", "c"}, {0, 1, 0}, t, {1, 5});
  auto rows = emit_regressor(s, alignment({{"a", 0.5}, {"b", 1.0}, {"c", 1.8}}), 1);
  ASSERT_EQ(rows.size(), 3u);
  const std::vector<double> offsets{0.5, 1.0, 1.8};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rows[i].offset, offsets[i]);
    EXPECT_EQ(rows[i].value, s.words[i].syn[0]);
  }
  EXPECT_GT(rows[2].value, 0.0);

  testing_support::ScratchDir dir("regressor");
  write_regressor_csv(dir.file("r.csv"), rows);
  std::ifstream in(dir.file("r.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "offset,value");
  auto back = read_regressor_csv(dir.file("r.csv"));
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_NEAR(back[i].offset, rows[i].offset, 1e-9);
    EXPECT_NEAR(back[i].value, rows[i].value, 1e-9);
  }
}

TEST(Regressor, ZeroSeriesGivesZeroRegressor) {
  std::mt19937_64 rng(1);
  auto t = random_table(2, 2, 0, rng);
  SurprisalSeries s;
  s.k_list = {1};
  std::vector<int> w{0, 1};
  append_sentence(s, {"a", "b"}, std::span<const int>(w), t, exact(), 0);
  append_sentence(s, {"c", "d"}, std::span<const int>(w), t, exact(), 1);
  auto rows = emit_regressor(s, alignment({{"a", 0.4}, {"b", 0.9}, {"c", 1.5}, {"d", 2.0}}), 1);
  for (const auto& r : rows) EXPECT_EQ(r.value, 0.0);
}

TEST(Regressor, MultiKAndSeriesHeaders) {
  TableScorer t(make_bundle(0.3, 0.5, 2));
  auto s = series_for({"a", "b", "c"}, {0, 1, 0}, t, {1, 5});
  testing_support::ScratchDir dir("multik");
  write_multi_k_csv(dir.file("m.csv"), s, alignment({{"a", 0.5}, {"b", 1.0}, {"c", 1.8}}));
  write_series_csv(dir.file("s.csv"), s, 5);
  std::ifstream m(dir.file("m.csv")), ser(dir.file("s.csv"));
  std::string line;
  std::getline(m, line);
  EXPECT_EQ(line, "offset,syn_k1,syn_k5,full_k1,lex_k1,full_k5,lex_k5");
  int rows = 0;
  while (std::getline(m, line)) ++rows;
  EXPECT_EQ(rows, 3);
  std::getline(ser, line);
  EXPECT_EQ(line, "word_index,sentence,word,syn,full,lex");
  EXPECT_THROW(emit_regressor(s, alignment({{"a", 0.5}, {"b", 1.0}, {"c", 1.8}}), 2), ContractViolation);
}

TEST(Decomposition, FunctionWordsCarryLessLexicalSurprisal) {
  auto train_set = generate_treebank(400, 11);
  auto test_set = generate_treebank(40, 12);
  auto vocab = build_vocabulary(train_set, 2);
  Model m(make_dims(vocab, EncoderMode::internal, InputMode::generative, nullptr, 16, 32), 7, 0.1);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.dropout = false;
  train(m, vocab, train_set, {}, cfg);

  const std::set<std::string> function_words{"the", "a", "this", "every", "some", "no", "of", "with", "about", "in",
                                             "on", "from", "to", "by", "at", "under"};
  std::vector<std::vector<std::string>> text;
  for (const auto& s : test_set) text.push_back(s.tokens);
  SearchOptions opt;
  opt.cap = 200;
  auto series = profile_text(m, vocab, text, {1}, opt);
  double fsum = 0.0, csum = 0.0;
  int fn = 0, cn = 0;
  for (const auto& w : series.words) {
    if (punctuation_token(w.word)) continue;
    if (function_words.count(w.word)) {
      fsum += w.lex[0];
      ++fn;
    } else {
      csum += w.lex[0];
      ++cn;
    }
  }
  ASSERT_GT(fn, 20);
  ASSERT_GT(cn, 20);
  EXPECT_LT(fsum / fn, csum / cn);
}
