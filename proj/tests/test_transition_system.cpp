#include <gtest/gtest.h>

#include <functional>
#include <map>
#include <random>
#include <set>

#include "support.hpp"
#include "synsurp/transition_system.hpp"

using namespace synsurp;

namespace {

LegalActions legal(bool s, bool l, bool r) {
  LegalActions a;
  a.shift = s;
  a.left = l;
  a.right = r;
  return a;
}

std::vector<int> heads_of(const DependencyTree& t) { return {t.heads.begin() + 1, t.heads.end()}; }

/// Every complete unlabeled action sequence for length n, by depth-first search.
std::vector<std::vector<Action>> all_derivations(int n) {
  std::vector<std::vector<Action>> out;
  std::vector<Action> seq;
  std::function<void(const ParserConfiguration&)> dfs = [&](const ParserConfiguration& c) {
    if (is_terminal(c)) {
      out.push_back(seq);
      return;
    }
    auto l = legal_actions(c);
    for (ActionKind k : {ActionKind::Shift, ActionKind::LeftArc, ActionKind::RightArc}) {
      if (!l.contains(k)) continue;
      seq.push_back(Action{k, -1});
      dfs(apply(c, seq.back()));
      seq.pop_back();
    }
  };
  dfs(initial_config(n));
  return out;
}

void expect_well_formed(const ParserConfiguration& c) {
  const auto& st = c.stack();
  std::set<int> seen;
  for (int i : st) {
    EXPECT_LT(i, c.buffer_front());
    EXPECT_GE(i, 1);
    EXPECT_TRUE(seen.insert(i).second) << c.describe();
  }
  for (const auto& a : c.arcs()) {
    EXPECT_NE(a.head, a.dependent);
    EXPECT_EQ(seen.count(a.dependent), 0u);
    EXPECT_LT(a.dependent, c.buffer_front());
  }
}

}  // namespace

TEST(InitialConfig, Shapes) {
  auto c1 = initial_config(1);
  EXPECT_TRUE(c1.stack().empty());
  EXPECT_EQ(c1.buffer_front(), 1);
  auto c3 = initial_config(3);
  EXPECT_EQ(c3.sentence_length(), 3);
  EXPECT_FALSE(c3.root_is_front());
  auto s = apply(c3, Action::shift());
  EXPECT_EQ(s.stack(), std::vector<int>{1});
  EXPECT_EQ(s.buffer_front(), 2);
  EXPECT_THROW(initial_config(0), ContractViolation);
}

TEST(LegalActions, SpecExamples) {
  auto c = initial_config(2);
  EXPECT_EQ(legal_actions(c), legal(true, false, false));
  c = apply(c, Action::shift());
  EXPECT_EQ(legal_actions(c), legal(true, true, false));
  c = apply(c, Action::shift());
  EXPECT_TRUE(c.root_is_front());
  EXPECT_EQ(legal_actions(c), legal(false, false, true));
}

TEST(LegalActions, RootFrontContinuationsComplete) {
  // (stack=[1,2], j=3), n=2: only RightArc is legal under the single-root rule; both
  // arc kinds are structurally possible and every legal continuation completes.
  auto c = replay(std::vector<Action>{Action::shift(), Action::shift()}, 2);
  std::function<int(const ParserConfiguration&)> count = [&](const ParserConfiguration& x) {
    if (is_terminal(x)) return 1;
    int total = 0;
    auto l = legal_actions(x);
    if (l.count() == 0) ADD_FAILURE() << "dead end at " << x.describe();
    for (ActionKind k : {ActionKind::Shift, ActionKind::LeftArc, ActionKind::RightArc})
      if (l.contains(k)) total += count(apply(x, Action{k, -1}));
    return total;
  };
  EXPECT_EQ(count(c), 1);
  auto done = apply(apply(c, Action::right()), Action::left());
  EXPECT_TRUE(is_terminal(done));
  EXPECT_EQ(heads_of(done.tree()), (std::vector<int>{0, 1}));
}

TEST(Apply, TableRows) {
  auto c = apply(initial_config(2), Action::shift());
  auto l = apply(c, Action::left(7));
  EXPECT_TRUE(l.stack().empty());
  EXPECT_EQ(l.buffer_front(), 2);
  ASSERT_EQ(l.arcs().size(), 1u);
  EXPECT_EQ(l.arcs()[0], (Arc{2, 1, 7}));

  auto c2 = replay(std::vector<Action>{Action::shift(), Action::shift()}, 3);
  auto r = apply(c2, Action::right(4));
  EXPECT_EQ(r.stack(), std::vector<int>{1});
  EXPECT_EQ(r.buffer_front(), 3);
  EXPECT_EQ(r.arcs().back(), (Arc{1, 2, 4}));
}

TEST(Apply, IllegalActionNamesActionAndConfig) {
  try {
    apply(initial_config(3), Action::right(2));
    FAIL();
  } catch (const ContractViolation& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("RightArc"), std::string::npos);
    EXPECT_NE(msg.find("stack=[]"), std::string::npos);
  }
}

TEST(Apply, RandomSequencesPreserveInvariants) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    int n = 1 + static_cast<int>(rng() % 9);
    auto c = initial_config(n);
    while (!is_terminal(c)) {
      auto l = legal_actions(c);
      ASSERT_GT(l.count(), 0) << c.describe();
      std::vector<ActionKind> opts;
      for (ActionKind k : {ActionKind::Shift, ActionKind::LeftArc, ActionKind::RightArc})
        if (l.contains(k)) opts.push_back(k);
      c = apply(c, Action{opts[rng() % opts.size()], static_cast<int>(rng() % 3)});
      expect_well_formed(c);
    }
    EXPECT_EQ(c.arcs().size(), static_cast<std::size_t>(n));
    int roots = 0;
    for (const auto& a : c.arcs()) roots += a.head == 0;
    EXPECT_EQ(roots, 1);
  }
}

TEST(StaticOracle, TwoTokenExample) {
  // labels: det = 0, root = 1
  std::vector<int> heads{2, 0}, labels{0, 1};
  auto seq = static_oracle(heads, labels);
  std::vector<Action> want{Action::shift(), Action::left(0), Action::shift(), Action::left(1)};
  EXPECT_EQ(seq, want);
}

TEST(StaticOracle, SingleToken) {
  std::vector<int> heads{0}, labels{3};
  auto seq = static_oracle(heads, labels);
  EXPECT_EQ(seq, (std::vector<Action>{Action::shift(), Action::left(3)}));
  EXPECT_TRUE(is_terminal(replay(seq, 1)));
}

TEST(StaticOracle, RejectsNonProjective) {
  std::vector<int> heads{3, 4, 0, 3}, labels{0, 0, 0, 0};
  EXPECT_THROW(static_oracle(heads, labels), ContractViolation);
}

TEST(StaticOracle, RoundTripAllProjectiveLabeledTreesUpToFive) {
  std::size_t checked = 0;
  for (int n = 1; n <= 5; ++n) {
    for (const auto& h : testing_support::rooted_trees(n, true)) {
      if (!testing_support::contiguous_yields(h)) continue;
      // all labelings over a 2-label set
      for (int mask = 0; mask < (1 << n); ++mask) {
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = (mask >> i) & 1;
        auto c = replay(static_oracle(h, labels), n);
        ASSERT_TRUE(is_terminal(c));
        auto t = c.tree();
        EXPECT_EQ(heads_of(t), h);
        EXPECT_EQ(std::vector<int>(t.labels.begin() + 1, t.labels.end()), labels);
        ++checked;
      }
    }
  }
  EXPECT_EQ(checked, 1u * 2 + 2u * 4 + 7u * 8 + 30u * 16 + 143u * 32);
}

TEST(IsTerminal, Cases) {
  auto c = replay(std::vector<Action>{Action::shift()}, 1);
  EXPECT_FALSE(is_terminal(c));
  EXPECT_TRUE(c.root_is_front());
  EXPECT_TRUE(is_terminal(apply(c, Action::left())));
}

// Derivation counts: the single-root rule still leaves spurious ambiguity from
// four tokens on (a tree whose root has dependents on both sides).
TEST(Derivations, CountsAgainstTreeCounts) {
  const std::map<int, std::pair<std::size_t, std::size_t>> expected{
      {1, {1, 1}}, {2, {2, 2}}, {3, {7, 7}}, {4, {32, 30}}, {5, {169, 143}}, {6, {974, 728}}};
  for (const auto& [n, counts] : expected) {
    auto ders = all_derivations(n);
    std::set<std::vector<int>> trees;
    for (const auto& d : ders) trees.insert(heads_of(replay(d, n).tree()));
    EXPECT_EQ(ders.size(), counts.first) << "n=" << n;
    EXPECT_EQ(trees.size(), counts.second) << "n=" << n;
    if (n <= 3) {
      EXPECT_EQ(ders.size(), trees.size());
    }
  }
}

TEST(Derivations, TreeSetIsExactlyProjectiveTreesUpToSix) {
  for (int n = 1; n <= 6; ++n) {
    std::map<std::vector<int>, std::vector<std::vector<Action>>> by_tree;
    for (auto& d : all_derivations(n)) by_tree[heads_of(replay(d, n).tree())].push_back(d);
    std::set<std::vector<int>> projective;
    for (const auto& h : testing_support::rooted_trees(n, true))
      if (testing_support::contiguous_yields(h)) projective.insert(h);
    std::set<std::vector<int>> derived;
    for (const auto& [h, _] : by_tree) derived.insert(h);
    EXPECT_EQ(derived, projective) << "n=" << n;
    for (const auto& h : projective) {
      std::vector<int> labels(h.size(), -1);
      auto seq = static_oracle(h, labels);
      const auto& ds = by_tree[h];
      EXPECT_NE(std::find(ds.begin(), ds.end(), seq), ds.end());
    }
  }
}
