#pragma once

// Attachment scores, micro-averaged over tokens.

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "synsurp/error.hpp"
#include "synsurp/transition_system.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp {

struct AttachmentCounts {
  std::size_t tokens = 0;
  std::size_t head = 0;        // correct head
  std::size_t head_label = 0;  // correct head and label
  std::size_t label = 0;       // correct label

  AttachmentCounts& operator+=(const AttachmentCounts& o) {
    tokens += o.tokens;
    head += o.head;
    head_label += o.head_label;
    label += o.label;
    return *this;
  }
  friend bool operator==(const AttachmentCounts&, const AttachmentCounts&) = default;
};

struct AttachmentReport {
  double las = 0.0;  // percent
  double uas = 0.0;
  double label_acc = 0.0;
  std::size_t token_count = 0;
  bool punctuation_excluded = false;
};

inline bool is_punctuation_label(std::string_view label) {
  static constexpr std::array<std::string_view, 4> kPunct{"punct", "P", "PU", "PUNCT"};
  for (auto p : kPunct)
    if (label == p) return true;
  return false;
}

/// Counts for one sentence. `label_names` maps predicted label ids to strings.
inline AttachmentCounts attachment_counts(const DependencyTree& pred, const Sentence& gold,
                                          const std::vector<std::string>& label_names, bool exclude_punct = false) {
  if (pred.size() != gold.size())
    throw ValidationError("attachment_scores: predicted tree has " + std::to_string(pred.size()) +
                          " tokens, gold sentence has " + std::to_string(gold.size()));
  AttachmentCounts c;
  for (std::size_t d = 1; d <= gold.size(); ++d) {
    const auto& gl = gold.labels[d - 1];
    if (exclude_punct && is_punctuation_label(gl)) continue;
    const int pl = pred.labels[d];
    const bool label_ok = pl >= 0 && static_cast<std::size_t>(pl) < label_names.size() && label_names[static_cast<std::size_t>(pl)] == gl;
    const bool head_ok = pred.heads[d] == gold.heads[d - 1];
    ++c.tokens;
    c.head += head_ok;
    c.label += label_ok;
    c.head_label += head_ok && label_ok;
  }
  return c;
}

inline AttachmentReport make_report(const AttachmentCounts& c, bool exclude_punct) {
  AttachmentReport r;
  r.token_count = c.tokens;
  r.punctuation_excluded = exclude_punct;
  if (c.tokens == 0) return r;
  const double n = static_cast<double>(c.tokens);
  r.uas = 100.0 * static_cast<double>(c.head) / n;
  r.las = 100.0 * static_cast<double>(c.head_label) / n;
  r.label_acc = 100.0 * static_cast<double>(c.label) / n;
  return r;
}

inline AttachmentReport attachment_scores(const DependencyTree& pred, const Sentence& gold,
                                          const std::vector<std::string>& label_names, bool exclude_punct = false) {
  return make_report(attachment_counts(pred, gold, label_names, exclude_punct), exclude_punct);
}

/// Micro-average over a corpus.
inline AttachmentReport attachment_scores(const std::vector<DependencyTree>& pred, const std::vector<Sentence>& gold,
                                          const std::vector<std::string>& label_names, bool exclude_punct = false) {
  if (pred.size() != gold.size())
    throw ValidationError("attachment_scores: " + std::to_string(pred.size()) + " predicted trees for " +
                          std::to_string(gold.size()) + " gold sentences");
  AttachmentCounts total;
  for (std::size_t s = 0; s < gold.size(); ++s) total += attachment_counts(pred[s], gold[s], label_names, exclude_punct);
  return make_report(total, exclude_punct);
}

inline nlohmann::json to_json(const AttachmentReport& r) {
  return {{"las", r.las},
          {"uas", r.uas},
          {"label_acc", r.label_acc},
          {"token_count", r.token_count},
          {"punctuation_excluded", r.punctuation_excluded}};
}

}  // namespace synsurp
