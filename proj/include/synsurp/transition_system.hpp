#pragma once

// Arc-hybrid transition system.
//
// A configuration is (stack, j): the stack holds token positions, j is the
// buffer front. Tokens are 1..n and a virtual ROOT sits at position n+1 at the
// end of the buffer; it is never shifted.
//
//   Shift     (s|i, j)   => (s|i|j, j+1)
//   LeftArc   (s|i, j)   => (s, j)      adds j -> i   (head 0 when j is ROOT)
//   RightArc  (s|l|i, j) => (s|l, j)    adds l -> i
//
// When ROOT is the buffer front, LeftArc is only legal for a single-item stack,
// so every derivation ends in exactly one root attachment.

#include <compare>
#include <cstdint>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "synsurp/error.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp {

enum class ActionKind : std::uint8_t { Shift = 0, LeftArc = 1, RightArc = 2 };

inline const char* to_string(ActionKind k) {
  switch (k) {
    case ActionKind::Shift: return "Shift";
    case ActionKind::LeftArc: return "LeftArc";
    case ActionKind::RightArc: return "RightArc";
  }
  return "?";
}

/// A transition. Arc actions carry a label id; -1 means unlabeled.
struct Action {
  ActionKind kind = ActionKind::Shift;
  int label = -1;

  static Action shift() { return {ActionKind::Shift, -1}; }
  static Action left(int label = -1) { return {ActionKind::LeftArc, label}; }
  static Action right(int label = -1) { return {ActionKind::RightArc, label}; }

  bool is_arc() const noexcept { return kind != ActionKind::Shift; }

  friend auto operator<=>(const Action&, const Action&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Action& a) {
  os << to_string(a.kind);
  if (a.is_arc() && a.label >= 0) os << ':' << a.label;
  return os;
}

struct Arc {
  int head = 0;  // 0 = root
  int dependent = 0;
  int label = -1;

  friend bool operator==(const Arc&, const Arc&) = default;
};

/// Heads and labels indexed by dependent position (1-based, slot 0 unused).
struct DependencyTree {
  std::vector<int> heads;
  std::vector<int> labels;

  std::size_t size() const noexcept { return heads.empty() ? 0 : heads.size() - 1; }
  friend bool operator==(const DependencyTree&, const DependencyTree&) = default;
};

class ParserConfiguration {
 public:
  ParserConfiguration() = default;

  int sentence_length() const noexcept { return n_; }
  const std::vector<int>& stack() const noexcept { return stack_; }
  int buffer_front() const noexcept { return front_; }
  const std::vector<Arc>& arcs() const noexcept { return arcs_; }

  bool root_is_front() const noexcept { return front_ == n_ + 1; }
  /// Stack top, or 0 for an empty stack.
  int top() const noexcept { return stack_.empty() ? 0 : stack_.back(); }

  friend bool operator==(const ParserConfiguration&, const ParserConfiguration&) = default;

  std::string describe() const {
    std::ostringstream os;
    os << "(stack=[";
    for (std::size_t k = 0; k < stack_.size(); ++k) os << (k ? "," : "") << stack_[k];
    os << "], j=" << front_ << ", n=" << n_ << ")";
    return os.str();
  }

  DependencyTree tree() const {
    DependencyTree t;
    t.heads.assign(static_cast<std::size_t>(n_) + 1, -1);
    t.labels.assign(static_cast<std::size_t>(n_) + 1, -1);
    for (const auto& a : arcs_) {
      t.heads[static_cast<std::size_t>(a.dependent)] = a.head;
      t.labels[static_cast<std::size_t>(a.dependent)] = a.label;
    }
    return t;
  }

  friend ParserConfiguration initial_config(int n);
  friend ParserConfiguration apply(const ParserConfiguration& c, Action a);

 private:
  int n_ = 0;
  std::vector<int> stack_;
  int front_ = 1;
  std::vector<Arc> arcs_;
};

inline ParserConfiguration initial_config(int n) {
  if (n < 1) throw ContractViolation("initial_config: sentence length must be >= 1");
  ParserConfiguration c;
  c.n_ = n;
  c.front_ = 1;
  return c;
}

struct LegalActions {
  bool shift = false;
  bool left = false;
  bool right = false;

  bool contains(ActionKind k) const noexcept {
    return k == ActionKind::Shift ? shift : k == ActionKind::LeftArc ? left : right;
  }
  int count() const noexcept { return shift + left + right; }
  bool reduce() const noexcept { return left || right; }
  friend bool operator==(const LegalActions&, const LegalActions&) = default;
};

inline LegalActions legal_actions(const ParserConfiguration& c) {
  LegalActions l;
  const auto depth = c.stack().size();
  l.shift = c.buffer_front() <= c.sentence_length();
  l.left = c.root_is_front() ? depth == 1 : depth >= 1;
  l.right = depth >= 2;
  return l;
}

inline ParserConfiguration apply(const ParserConfiguration& c, Action a) {
  if (!legal_actions(c).contains(a.kind)) {
    std::ostringstream os;
    os << "apply: illegal action " << a << " in configuration " << c.describe();
    throw ContractViolation(os.str());
  }
  ParserConfiguration next = c;
  switch (a.kind) {
    case ActionKind::Shift:
      next.stack_.push_back(c.front_);
      ++next.front_;
      break;
    case ActionKind::LeftArc: {
      int i = next.stack_.back();
      next.stack_.pop_back();
      next.arcs_.push_back({c.root_is_front() ? 0 : c.front_, i, a.label});
      break;
    }
    case ActionKind::RightArc: {
      int i = next.stack_.back();
      next.stack_.pop_back();
      next.arcs_.push_back({next.stack_.back(), i, a.label});
      break;
    }
  }
  return next;
}

inline bool is_terminal(const ParserConfiguration& c) {
  return c.stack().empty() && c.root_is_front() &&
         c.arcs().size() == static_cast<std::size_t>(c.sentence_length());
}

inline ParserConfiguration replay(std::span<const Action> actions, int n) {
  auto c = initial_config(n);
  for (const auto& a : actions) c = apply(c, a);
  return c;
}

/// Gold transition sequence for a projective tree. `heads` are 1-based token
/// heads (0 = root) and `labels` the matching label ids.
inline std::vector<Action> static_oracle(std::span<const int> heads, std::span<const int> labels) {
  const int n = static_cast<int>(heads.size());
  {
    Sentence probe;
    probe.tokens.assign(heads.size(), "_");
    probe.heads.assign(heads.begin(), heads.end());
    probe.labels.assign(heads.size(), "_");
    validate_tree(probe);
    if (!is_projective(probe)) throw ContractViolation("static_oracle: tree is not projective");
  }
  std::vector<int> pending(static_cast<std::size_t>(n) + 1, 0);
  for (int h : heads)
    if (h > 0) ++pending[static_cast<std::size_t>(h)];

  std::vector<Action> seq;
  auto c = initial_config(n);
  while (!is_terminal(c)) {
    Action next = Action::shift();
    if (!c.stack().empty()) {
      int i = c.top();
      int gold = heads[static_cast<std::size_t>(i - 1)];
      int label = labels[static_cast<std::size_t>(i - 1)];
      bool complete = pending[static_cast<std::size_t>(i)] == 0;
      int front_as_head = c.root_is_front() ? 0 : c.buffer_front();
      const auto& st = c.stack();
      if (complete && gold == front_as_head)
        next = Action::left(label);
      else if (complete && st.size() >= 2 && gold == st[st.size() - 2])
        next = Action::right(label);
    }
    if (!legal_actions(c).contains(next.kind))
      throw ContractViolation("static_oracle: no gold transition from " + c.describe());
    if (next.is_arc()) {
      int head = next.kind == ActionKind::LeftArc ? (c.root_is_front() ? 0 : c.buffer_front())
                                                  : c.stack()[c.stack().size() - 2];
      if (head > 0) --pending[static_cast<std::size_t>(head)];
    }
    seq.push_back(next);
    c = apply(c, next);
  }
  return seq;
}

inline std::vector<Action> static_oracle(const Sentence& s, const Vocabulary& vocab) {
  std::vector<int> labels;
  labels.reserve(s.size());
  for (const auto& l : s.labels) labels.push_back(vocab.label_id(l));
  return static_oracle(s.heads, labels);
}

}  // namespace synsurp
