#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <random>
#include <set>
#include <sstream>

#include "support.hpp"
#include "synsurp/evaluation.hpp"
#include "synsurp/synthetic.hpp"

using namespace synsurp;

namespace {

const std::vector<std::string> kLabels{"det", "nsubj", "root", "obj", "punct"};

int label_index(const std::string& l) {
  return static_cast<int>(std::find(kLabels.begin(), kLabels.end(), l) - kLabels.begin());
}

DependencyTree tree_of(const std::vector<int>& heads, const std::vector<std::string>& labels) {
  DependencyTree t;
  t.heads.push_back(-1);
  t.labels.push_back(-1);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    t.heads.push_back(heads[i]);
    t.labels.push_back(label_index(labels[i]));
  }
  return t;
}

Sentence gold_sentence() {
  Sentence s;
  s.tokens = {"the", "dog", "saw", "cats"};
  s.heads = {2, 3, 0, 3};
  s.labels = {"det", "nsubj", "root", "obj"};
  return s;
}

/// Counts from the CoNLL text of gold and predicted trees, read column by column.
std::array<std::size_t, 4> recount(const std::vector<Sentence>& gold, const std::vector<Sentence>& pred) {
  std::ostringstream g, p;
  write_conll(g, gold);
  write_conll(p, pred);
  std::istringstream gi(g.str()), pi(p.str());
  std::string gl, pl;
  std::array<std::size_t, 4> c{};  // tokens, head, head+label, label
  while (std::getline(gi, gl) && std::getline(pi, pl)) {
    if (gl.empty() || gl[0] == '#') continue;
    std::vector<std::string> gc, pc;
    std::string field;
    for (std::istringstream s(gl); std::getline(s, field, '\t');) gc.push_back(field);
    for (std::istringstream s(pl); std::getline(s, field, '\t');) pc.push_back(field);
    const bool h = gc[6] == pc[6], l = gc[7] == pc[7];
    c[0] += 1;
    c[1] += h;
    c[2] += h && l;
    c[3] += l;
  }
  return c;
}

}  // namespace

TEST(AttachmentScores, PerfectPrediction) {
  auto gold = gold_sentence();
  auto r = attachment_scores(tree_of(gold.heads, gold.labels), gold, kLabels);
  EXPECT_EQ(r.las, 100.0);
  EXPECT_EQ(r.uas, 100.0);
  EXPECT_EQ(r.label_acc, 100.0);
  EXPECT_EQ(r.token_count, 4u);
  EXPECT_FALSE(r.punctuation_excluded);
}

TEST(AttachmentScores, HandCountedExample) {
  // heads right for tokens 1 and 3; labels right for 1, 2 and 4.
  auto gold = gold_sentence();
  auto pred = tree_of({2, 1, 0, 1}, {"det", "nsubj", "obj", "obj"});
  auto r = attachment_scores(pred, gold, kLabels);
  EXPECT_DOUBLE_EQ(r.uas, 50.0);
  EXPECT_DOUBLE_EQ(r.las, 25.0);
  EXPECT_DOUBLE_EQ(r.label_acc, 75.0);
}

TEST(AttachmentScores, TokenMismatchThrows) {
  auto gold = gold_sentence();
  EXPECT_THROW(attachment_scores(tree_of({2, 0, 2}, {"det", "root", "obj"}), gold, kLabels), ValidationError);
  std::vector<DependencyTree> one{tree_of(gold.heads, gold.labels)};
  EXPECT_THROW(attachment_scores(one, std::vector<Sentence>{gold, gold}, kLabels), ValidationError);
}

TEST(AttachmentScores, PunctuationExclusion) {
  Sentence gold;
  gold.tokens = {"dogs", "bark", "."};
  gold.heads = {2, 0, 2};
  gold.labels = {"nsubj", "root", "punct"};
  auto pred = tree_of({2, 0, 1}, {"nsubj", "root", "obj"});
  auto with = attachment_scores(pred, gold, kLabels, false);
  auto without = attachment_scores(pred, gold, kLabels, true);
  EXPECT_EQ(with.token_count, 3u);
  EXPECT_NEAR(with.uas, 200.0 / 3.0, 1e-12);
  EXPECT_EQ(without.token_count, 2u);
  EXPECT_EQ(without.uas, 100.0);
  EXPECT_TRUE(without.punctuation_excluded);
  EXPECT_TRUE(is_punctuation_label("PUNCT"));
  EXPECT_FALSE(is_punctuation_label("obj"));
}

TEST(AttachmentScores, UnknownPredictedLabelIsWrong) {
  auto gold = gold_sentence();
  auto pred = tree_of(gold.heads, gold.labels);
  pred.labels[1] = 99;
  pred.labels[2] = -1;
  auto r = attachment_scores(pred, gold, kLabels);
  EXPECT_EQ(r.uas, 100.0);
  EXPECT_EQ(r.label_acc, 50.0);
}

class CorpusScores : public ::testing::Test {
 protected:
  void SetUp() override {
    gold = synthetic::generate_treebank(100, 4);
    std::mt19937_64 rng(6);
    for (const auto& s : gold) names_seen.insert(s.labels.begin(), s.labels.end());
    names.assign(names_seen.begin(), names_seen.end());
    for (const auto& s : gold) {
      Sentence p = s;
      DependencyTree t;
      t.heads.push_back(-1);
      t.labels.push_back(-1);
      for (std::size_t d = 0; d < s.size(); ++d) {
        if (rng() % 4 == 0) p.heads[d] = static_cast<int>(rng() % (s.size() + 1));
        if (rng() % 5 == 0) p.labels[d] = names[rng() % names.size()];
        t.heads.push_back(p.heads[d]);
        t.labels.push_back(static_cast<int>(std::find(names.begin(), names.end(), p.labels[d]) - names.begin()));
      }
      pred_sentences.push_back(p);
      pred.push_back(t);
    }
  }
  std::vector<Sentence> gold, pred_sentences;
  std::vector<DependencyTree> pred;
  std::set<std::string> names_seen;
  std::vector<std::string> names;
};

TEST_F(CorpusScores, MicroAverageMatchesRecount) {
  auto r = attachment_scores(pred, gold, names);
  auto c = recount(gold, pred_sentences);
  ASSERT_EQ(r.token_count, c[0]);
  const double n = static_cast<double>(c[0]);
  EXPECT_NEAR(r.uas, 100.0 * static_cast<double>(c[1]) / n, 1e-9);
  EXPECT_NEAR(r.las, 100.0 * static_cast<double>(c[2]) / n, 1e-9);
  EXPECT_NEAR(r.label_acc, 100.0 * static_cast<double>(c[3]) / n, 1e-9);
  EXPECT_LT(r.uas, 100.0);
  EXPECT_LT(r.label_acc, 100.0);
}

TEST_F(CorpusScores, LasBoundedAndOrderInvariant) {
  for (bool punct : {false, true}) {
    auto r = attachment_scores(pred, gold, names, punct);
    EXPECT_LE(r.las, std::min(r.uas, r.label_acc));
    EXPECT_GE(r.las, 0.0);
    EXPECT_LE(r.uas, 100.0);
    std::vector<std::size_t> order(gold.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), std::mt19937_64(2));
    std::vector<DependencyTree> p2;
    std::vector<Sentence> g2;
    for (auto i : order) {
      p2.push_back(pred[i]);
      g2.push_back(gold[i]);
    }
    auto r2 = attachment_scores(p2, g2, names, punct);
    EXPECT_EQ(r2.las, r.las);
    EXPECT_EQ(r2.uas, r.uas);
    EXPECT_EQ(r2.label_acc, r.label_acc);
  }
}

TEST_F(CorpusScores, CountsAreAssociative) {
  AttachmentCounts a, b;
  for (std::size_t s = 0; s < gold.size(); ++s)
    (s < 50 ? a : b) += attachment_counts(pred[s], gold[s], names);
  a += b;
  AttachmentCounts all;
  for (std::size_t s = 0; s < gold.size(); ++s) all += attachment_counts(pred[s], gold[s], names);
  EXPECT_EQ(a, all);
  auto j = to_json(make_report(all, false));
  EXPECT_EQ(j["token_count"], all.tokens);
}
