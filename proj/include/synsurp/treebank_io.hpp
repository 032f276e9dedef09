#pragma once

// Treebank and stimulus readers, vocabulary with unknown-word signatures,
// and the projectivity filter.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "synsurp/csv.hpp"
#include "synsurp/error.hpp"

namespace synsurp {

/// A tokenised sentence with an optional gold tree. Token positions are 1-based
/// in `heads`, with 0 the artificial root.
struct Sentence {
  std::vector<std::string> tokens;
  std::vector<int> heads;
  std::vector<std::string> labels;

  std::size_t size() const noexcept { return tokens.size(); }
  bool has_tree() const noexcept { return !heads.empty(); }

  friend bool operator==(const Sentence&, const Sentence&) = default;
};

enum class ConllFormat { conllx, conllu };

namespace detail {

inline bool is_integer(std::string_view s) {
  if (s.empty()) return false;
  std::size_t i = (s[0] == '-') ? 1 : 0;
  if (i == s.size()) return false;
  for (; i < s.size(); ++i)
    if (s[i] < '0' || s[i] > '9') return false;
  return true;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return cols;
}

}  // namespace detail

/// Reads blank-line separated CoNLL-X / CoNLL-U sentences. Comment lines and
/// CoNLL-U multiword (`1-2`) or empty-node (`1.1`) rows are skipped.
inline std::vector<Sentence> read_conll(std::istream& in, ConllFormat format = ConllFormat::conllu) {
  std::vector<Sentence> out;
  Sentence cur;
  bool any_head = false;
  bool missing_head = false;
  std::string line;
  std::size_t lineno = 0;

  auto flush = [&](std::size_t at) {
    if (cur.tokens.empty()) return;
    if (any_head && missing_head) throw ParseError("sentence mixes rows with and without HEAD", at);
    if (!any_head) {
      cur.heads.clear();
      cur.labels.clear();
    }
    out.push_back(std::move(cur));
    cur = Sentence{};
    any_head = missing_head = false;
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush(lineno);
      continue;
    }
    if (line[0] == '#') continue;
    auto cols = detail::split_tabs(line);
    if (cols.size() < 8) throw ParseError("expected at least 8 tab-separated columns", lineno);
    std::string_view id = cols[0];
    if (format == ConllFormat::conllu &&
        (id.find('-') != std::string_view::npos || id.find('.') != std::string_view::npos))
      continue;
    if (!detail::is_integer(id)) throw ParseError("non-integer ID '" + std::string(id) + "'", lineno);
    if (std::stoul(std::string(id)) != cur.tokens.size() + 1)
      throw ParseError("token IDs must be consecutive from 1", lineno);
    cur.tokens.emplace_back(cols[1]);
    if (cols[6] == "_") {
      missing_head = true;
      cur.heads.push_back(0);
      cur.labels.emplace_back("_");
    } else {
      if (!detail::is_integer(cols[6]))
        throw ParseError("non-integer HEAD '" + std::string(cols[6]) + "'", lineno);
      any_head = true;
      cur.heads.push_back(std::stoi(std::string(cols[6])));
      cur.labels.emplace_back(cols[7]);
    }
  }
  flush(lineno);
  for (const auto& s : out)
    for (int h : s.heads)
      if (h < 0 || h > static_cast<int>(s.size())) throw ParseError("HEAD out of range");
  return out;
}

inline std::vector<Sentence> read_conll(const std::string& path, ConllFormat format = ConllFormat::conllu) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  return read_conll(in, format);
}

/// Writes ID, FORM, HEAD and DEPREL; all other columns are `_`.
inline void write_conll(std::ostream& out, const std::vector<Sentence>& sentences,
                        ConllFormat format = ConllFormat::conllu) {
  for (const auto& s : sentences) {
    for (std::size_t t = 0; t < s.size(); ++t) {
      out << (t + 1) << '\t' << s.tokens[t] << "\t_\t_\t_\t_\t";
      if (s.has_tree())
        out << s.heads[t] << '\t' << s.labels[t];
      else
        out << "_\t_";
      out << "\t_\t_\n";
    }
    out << '\n';
  }
  (void)format;
}

inline void write_conll(const std::string& path, const std::vector<Sentence>& sentences,
                        ConllFormat format = ConllFormat::conllu) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  write_conll(out, sentences, format);
}

/// Checks heads are in range, exactly one token attaches to root, and there are no cycles.
inline void validate_tree(const Sentence& s) {
  const int n = static_cast<int>(s.size());
  if (static_cast<int>(s.heads.size()) != n || s.labels.size() != s.size())
    throw ValidationError("sentence has no complete gold tree");
  int roots = 0;
  for (int h : s.heads) {
    if (h < 0 || h > n) throw ValidationError("head index out of range");
    roots += (h == 0);
  }
  if (roots != 1) throw ValidationError("gold tree must have exactly one root attachment");
  for (int d = 1; d <= n; ++d) {
    int cur = d;
    for (int steps = 0; cur != 0; ++steps) {
      if (steps > n) throw ValidationError("gold tree contains a cycle");
      cur = s.heads[cur - 1];
    }
  }
}

/// True iff no two arcs cross when drawn above the tokens, with root arcs drawn from position 0.
inline bool is_projective(const Sentence& s) {
  const int n = static_cast<int>(s.size());
  if (static_cast<int>(s.heads.size()) != n) throw ContractViolation("is_projective: sentence has no gold tree");
  for (int a = 1; a <= n; ++a) {
    int l1 = std::min(a, s.heads[a - 1]), r1 = std::max(a, s.heads[a - 1]);
    for (int b = a + 1; b <= n; ++b) {
      int l2 = std::min(b, s.heads[b - 1]), r2 = std::max(b, s.heads[b - 1]);
      if ((l1 < l2 && l2 < r1 && r1 < r2) || (l2 < l1 && l1 < r2 && r2 < r1)) return false;
    }
  }
  return true;
}

/// Keeps projective sentences with valid trees. `dropped` receives the number removed.
inline std::vector<Sentence> filter_projective(const std::vector<Sentence>& in, std::size_t* dropped = nullptr) {
  std::vector<Sentence> out;
  std::size_t n_dropped = 0;
  for (const auto& s : in) {
    bool keep = s.has_tree() && !s.tokens.empty();
    if (keep) {
      try {
        validate_tree(s);
        keep = is_projective(s);
      } catch (const ValidationError&) {
        keep = false;
      }
    }
    if (keep)
      out.push_back(s);
    else
      ++n_dropped;
  }
  if (n_dropped) std::clog << "[treebank] dropped " << n_dropped << " non-projective or malformed sentences\n";
  if (dropped) *dropped = n_dropped;
  return out;
}

// ---------------------------------------------------------------------------
// Unknown-word signatures

namespace detail {

inline std::vector<char32_t> decode_utf8(std::string_view s) {
  std::vector<char32_t> cps;
  for (std::size_t i = 0; i < s.size();) {
    auto c = static_cast<unsigned char>(s[i]);
    int len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    for (int k = 1; k < len && i + k < s.size(); ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    cps.push_back(cp);
    i += len;
  }
  return cps;
}

inline bool is_cjk(char32_t cp) {
  return (cp >= 0x4E00 && cp <= 0x9FFF) || (cp >= 0x3400 && cp <= 0x4DBF) || (cp >= 0x3000 && cp <= 0x303F) ||
         (cp >= 0xFF00 && cp <= 0xFFEF) || (cp >= 0x20000 && cp <= 0x2A6DF);
}

}  // namespace detail

/// Berkeley-parser style unknown-word class, e.g. `UNK-INITC`, `UNK-LC-ing`, `UNK-NUM-DASH`.
/// Words containing CJK characters get `UNK-ZH[-NUM][-LATIN]-L{1,2,3}` instead.
inline std::string signature(std::string_view word) {
  auto cps = detail::decode_utf8(word);
  bool cjk = std::any_of(cps.begin(), cps.end(), detail::is_cjk);
  if (cjk) {
    bool digit = false, latin = false;
    for (char32_t c : cps) {
      digit |= (c >= '0' && c <= '9') || (c >= 0xFF10 && c <= 0xFF19);
      latin |= (c < 0x80 && std::isalpha(static_cast<int>(c)));
    }
    std::string sig = "UNK-ZH";
    if (digit) sig += "-NUM";
    if (latin) sig += "-LATIN";
    sig += "-L" + std::to_string(std::min<std::size_t>(cps.size(), 3));
    return sig;
  }

  int caps = 0;
  bool digit = false, dash = false, lower = false, all_alpha = !word.empty();
  for (unsigned char c : word) {
    if (std::isupper(c)) ++caps;
    if (std::islower(c)) lower = true;
    if (std::isdigit(c)) digit = true;
    if (c == '-') dash = true;
    if (!std::isalpha(c)) all_alpha = false;
  }
  std::string sig = "UNK";
  unsigned char first = word.empty() ? 0 : static_cast<unsigned char>(word[0]);
  if (std::isupper(first))
    sig += caps == 1 ? "-INITC" : "-CAPS";
  else if (!std::isalpha(first) && caps > 0)
    sig += "-CAPS";
  else if (lower)
    sig += "-LC";
  if (digit) sig += "-NUM";
  if (dash) sig += "-DASH";
  if (all_alpha && word.size() >= 3) {
    static constexpr std::string_view kSuffixes[] = {"ity", "ing", "ion", "est", "ed", "er", "ly", "al", "s", "y"};
    std::string lowered;
    for (unsigned char c : word) lowered.push_back(static_cast<char>(std::tolower(c)));
    for (auto suffix : kSuffixes) {
      if (lowered.size() > suffix.size() && lowered.ends_with(suffix)) {
        sig += "-";
        sig += suffix;
        break;
      }
    }
  }
  return sig;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Parser word classes: training forms seen at least `min_count` times, plus the
/// signature classes realised by rarer forms, plus a bare `UNK` fallback.
class Vocabulary {
 public:
  static constexpr std::string_view kFallback = "UNK";

  Vocabulary() = default;

  std::size_t size() const noexcept { return classes_.size(); }
  std::size_t known_count() const noexcept { return word_to_id_.size(); }
  const std::vector<std::string>& classes() const noexcept { return classes_; }
  const std::string& class_name(std::size_t id) const { return classes_.at(id); }
  const std::unordered_map<std::string, int>& word_to_id() const noexcept { return word_to_id_; }
  const std::unordered_map<std::string, int>& signature_to_id() const noexcept { return signature_to_id_; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  bool is_known(std::string_view word) const { return word_to_id_.count(std::string(word)) > 0; }

  /// Total: every string maps to exactly one class id.
  int lookup(std::string_view word) const {
    if (auto it = word_to_id_.find(std::string(word)); it != word_to_id_.end()) return it->second;
    std::string sig = signature(word);
    while (true) {
      if (auto it = signature_to_id_.find(sig); it != signature_to_id_.end()) return it->second;
      auto cut = sig.rfind('-');
      if (cut == std::string::npos) break;
      sig.resize(cut);
    }
    return signature_to_id_.at(std::string(kFallback));
  }

  std::vector<int> lookup(const std::vector<std::string>& words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(lookup(w));
    return ids;
  }

  int label_id(std::string_view label) const {
    auto it = std::lower_bound(labels_.begin(), labels_.end(), label);
    if (it == labels_.end() || *it != label) throw LookupError("unknown dependency label '" + std::string(label) + "'");
    return static_cast<int>(it - labels_.begin());
  }

  /// FNV-1a over the canonical class and label lists.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::string_view s) {
      for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
      }
      h ^= 0xFF;
      h *= 1099511628211ull;
    };
    for (const auto& c : classes_) mix(c);
    mix("|labels|");
    for (const auto& l : labels_) mix(l);
    return h;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["classes"] = classes_;
    j["known"] = word_to_id_.size();
    j["labels"] = labels_;
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    v.classes_ = j.at("classes").get<std::vector<std::string>>();
    v.labels_ = j.at("labels").get<std::vector<std::string>>();
    std::size_t known = j.at("known").get<std::size_t>();
    for (std::size_t i = 0; i < v.classes_.size(); ++i)
      (i < known ? v.word_to_id_ : v.signature_to_id_)[v.classes_[i]] = static_cast<int>(i);
    return v;
  }

  friend Vocabulary build_vocabulary(const std::vector<Sentence>& training, int min_count);

 private:
  std::vector<std::string> classes_;
  std::unordered_map<std::string, int> word_to_id_;
  std::unordered_map<std::string, int> signature_to_id_;
  std::vector<std::string> labels_;
};

inline Vocabulary build_vocabulary(const std::vector<Sentence>& training, int min_count = 2) {
  if (training.empty()) throw ContractViolation("build_vocabulary: empty training set");
  std::map<std::string, int> counts;
  std::vector<std::string> labels;
  for (const auto& s : training) {
    for (const auto& w : s.tokens) ++counts[w];
    for (const auto& l : s.labels) labels.push_back(l);
  }
  std::vector<std::pair<std::string, int>> known;
  std::vector<std::string> sigs;
  for (const auto& [w, c] : counts) {
    if (c >= min_count)
      known.emplace_back(w, c);
    else
      sigs.push_back(signature(w));
  }
  std::stable_sort(known.begin(), known.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::sort(sigs.begin(), sigs.end());
  sigs.erase(std::unique(sigs.begin(), sigs.end()), sigs.end());
  if (!std::binary_search(sigs.begin(), sigs.end(), std::string(Vocabulary::kFallback)))
    sigs.emplace_back(Vocabulary::kFallback);

  Vocabulary v;
  for (const auto& [w, c] : known) {
    v.word_to_id_[w] = static_cast<int>(v.classes_.size());
    v.classes_.push_back(w);
  }
  for (const auto& s : sigs) {
    v.signature_to_id_[s] = static_cast<int>(v.classes_.size());
    v.classes_.push_back(s);
  }
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  v.labels_ = std::move(labels);
  return v;
}

// ---------------------------------------------------------------------------
// Stimulus files

struct AlignedWord {
  std::string word;
  double onset = 0.0;
  double offset = 0.0;
};

/// Words of the audio stimulus in presentation order.
struct StimulusAlignment {
  std::vector<AlignedWord> entries;

  std::size_t size() const noexcept { return entries.size(); }

  void validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].onset > entries[i].offset)
        throw ValidationError("alignment entry " + std::to_string(i) + ": onset after offset");
      if (i > 0 && !(entries[i].offset > entries[i - 1].offset))
        throw ValidationError("alignment offsets not strictly increasing at entry " + std::to_string(i));
    }
  }
};

/// CSV with header `word,onset,offset` (seconds).
inline StimulusAlignment read_alignment(const std::string& path) {
  auto table = csv::read(path, {"word", "onset", "offset"});
  StimulusAlignment a;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    a.entries.push_back({row[0], csv::to_double(row[1], table.lines[r]), csv::to_double(row[2], table.lines[r])});
  }
  a.validate();
  return a;
}

/// Uniformly sampled feature (e.g. RMS intensity every 10 ms).
struct FeatureSeries {
  double start_time = 0.0;
  double sample_period = 0.0;
  std::vector<double> values;

  double duration() const noexcept { return static_cast<double>(values.size()) * sample_period; }
};

/// CSV with header `time,value`. The period comes from a `<path>.json` sidecar
/// (`{"sample_period": s}`) or, absent that, from the spacing of the first two rows.
inline FeatureSeries read_feature_series(const std::string& path) {
  auto table = csv::read(path, {"time", "value"});
  FeatureSeries f;
  std::vector<double> times;
  times.reserve(table.rows.size());
  f.values.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    times.push_back(csv::to_double(table.rows[r][0], table.lines[r]));
    f.values.push_back(csv::to_double(table.rows[r][1], table.lines[r]));
  }
  std::optional<double> period;
  if (std::ifstream side(path + ".json"); side) {
    auto j = nlohmann::json::parse(side);
    period = j.at("sample_period").get<double>();
  }
  if (!period) {
    if (times.size() < 2) throw ValidationError(path + ": cannot infer sample period from fewer than 2 rows");
    period = times[1] - times[0];
  }
  if (!(*period > 0)) throw ValidationError(path + ": sample period must be positive");
  f.sample_period = *period;
  f.start_time = times.empty() ? 0.0 : times[0];
  for (std::size_t i = 0; i < times.size(); ++i) {
    double expected = f.start_time + static_cast<double>(i) * f.sample_period;
    if (std::abs(times[i] - expected) > 1e-3 * f.sample_period)
      throw ValidationError(path + ": samples not uniform at row " + std::to_string(i + 1));
  }
  return f;
}

/// Word frequency per million from a `word,per_million` CSV.
using FrequencyTable = std::unordered_map<std::string, double>;

inline FrequencyTable read_frequency_table(const std::string& path) {
  auto table = csv::read(path, {"word", "per_million"});
  FrequencyTable f;
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    f[table.rows[r][0]] = csv::to_double(table.rows[r][1], table.lines[r]);
  return f;
}

}  // namespace synsurp
