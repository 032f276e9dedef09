#pragma once

// Probability factors of the generative arc-hybrid parser.
//
// A prefix encoder turns the consumed tokens into one vector per position
// (position 0 is the beginning-of-sentence state, position n+1 the state after
// the end-of-sentence symbol). Four classifiers read the pair [h_i; h_j] of the
// stack top i and the buffer front j:
//
//   transition  p(shift) / p(reduce)
//   direction   p(left) / p(right)            (reduce actions)
//   label       p(label)                      (arc actions)
//   word        p(next word class or EOS)     (shift actions)
//
// An empty stack uses a learned null vector in place of h_i.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "synsurp/error.hpp"
#include "synsurp/transition_system.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp {

enum class EncoderMode { internal, external };
enum class InputMode { full_input, generative };

NLOHMANN_JSON_SERIALIZE_ENUM(EncoderMode, {{EncoderMode::internal, "internal"}, {EncoderMode::external, "external"}})
NLOHMANN_JSON_SERIALIZE_ENUM(InputMode, {{InputMode::full_input, "full_input"}, {InputMode::generative, "generative"}})

/// Normalised distributions computed from one (h_i, h_j) pair.
struct ScoreBundle {
  double p_shift = 0.5;
  double p_reduce = 0.5;
  double p_left = 0.5;
  double p_right = 0.5;
  std::vector<double> word_dist;   // parser word classes, then end-of-sentence
  std::vector<double> label_dist;  // label inventory

  int eos() const noexcept { return static_cast<int>(word_dist.size()) - 1; }
};

/// Natural-log probability of the structural part of `a` (transition, direction and
/// optionally label) at a configuration whose legal actions are `legal`. Choices with
/// a single legal option contribute factor 1.
inline double log_action_factor(const ScoreBundle& s, const LegalActions& legal, Action a, bool use_labels) {
  double lp = 0.0;
  if (a.kind == ActionKind::Shift) {
    if (legal.reduce()) lp += std::log(s.p_shift);
    return lp;
  }
  if (legal.shift) lp += std::log(s.p_reduce);
  if (a.kind == ActionKind::LeftArc && legal.right) lp += std::log(s.p_left);
  if (a.kind == ActionKind::RightArc && legal.left) lp += std::log(s.p_right);
  if (use_labels && a.label >= 0) lp += std::log(s.label_dist[static_cast<std::size_t>(a.label)]);
  return lp;
}

/// Natural-log probability of generating `word` (EOS allowed). The first word of a
/// sentence is drawn with EOS masked out.
inline double log_word_factor(const ScoreBundle& s, int word, bool first_word) {
  double p = s.word_dist[static_cast<std::size_t>(word)];
  if (first_word) {
    if (word == s.eos()) return -std::numeric_limits<double>::infinity();
    return std::log(p) - std::log1p(-s.word_dist.back());
  }
  return std::log(p);
}

// ---------------------------------------------------------------------------
// Model parameters

struct ModelDims {
  EncoderMode mode = EncoderMode::internal;
  InputMode input = InputMode::generative;
  std::size_t word_classes = 0;   // parser vocabulary (EOS not included)
  std::size_t labels = 0;
  std::size_t encoder_vocab = 0;  // internal encoder token ids, BOS and EOS last
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 256;   // encoding dimension d

  std::size_t output_classes() const noexcept { return word_classes + 1; }
  std::size_t feature_dim() const noexcept { return 2 * hidden_dim; }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline void to_json(nlohmann::json& j, const ModelDims& d) {
  j = {{"mode", d.mode}, {"input", d.input}, {"word_classes", d.word_classes}, {"labels", d.labels},
       {"encoder_vocab", d.encoder_vocab}, {"embed_dim", d.embed_dim}, {"hidden_dim", d.hidden_dim}};
}
inline void from_json(const nlohmann::json& j, ModelDims& d) {
  j.at("mode").get_to(d.mode);
  j.at("input").get_to(d.input);
  j.at("word_classes").get_to(d.word_classes);
  j.at("labels").get_to(d.labels);
  j.at("encoder_vocab").get_to(d.encoder_vocab);
  j.at("embed_dim").get_to(d.embed_dim);
  j.at("hidden_dim").get_to(d.hidden_dim);
}

/// Offsets of each parameter block inside the flat parameter vector.
struct ParameterLayout {
  struct Block {
    std::size_t offset = 0, rows = 0, cols = 0;
    std::size_t size() const noexcept { return rows * cols; }
  };
  Block embed, w_in, w_rec, b_rec;  // internal encoder
  Block bos, eos;                   // external encoder boundary vectors
  Block null_top;
  Block w_tr, b_tr, w_dir, b_dir, w_lab, b_lab, w_word, b_word;
  std::size_t total = 0;

  explicit ParameterLayout(const ModelDims& d = {}) {
    auto add = [&](Block& b, std::size_t r, std::size_t c) {
      b = {total, r, c};
      total += r * c;
    };
    const std::size_t h = d.hidden_dim, f = d.feature_dim();
    if (d.mode == EncoderMode::internal) {
      add(embed, d.embed_dim, d.encoder_vocab);
      add(w_in, h, d.embed_dim);
      add(w_rec, h, h);
      add(b_rec, h, 1);
    } else {
      add(bos, h, 1);
      add(eos, h, 1);
    }
    add(null_top, h, 1);
    add(w_tr, 2, f);
    add(b_tr, 2, 1);
    add(w_dir, 2, f);
    add(b_dir, 2, 1);
    add(w_lab, d.labels, f);
    add(b_lab, d.labels, 1);
    add(w_word, d.output_classes(), f);
    add(b_word, d.output_classes(), 1);
  }
};

class Model {
 public:
  Model() = default;

  /// Parameters drawn uniformly from [-init_range, init_range] with a seeded generator.
  Model(ModelDims dims, std::uint64_t seed, double init_range = 0.1) : dims_(dims), layout_(dims) {
    params_.resize(layout_.total);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-init_range, init_range);
    for (auto& p : params_) p = u(rng);
  }

  /// All-zero parameters: every classifier is uniform.
  static Model zeros(ModelDims dims) {
    Model m;
    m.dims_ = dims;
    m.layout_ = ParameterLayout(dims);
    m.params_.assign(m.layout_.total, 0.0);
    return m;
  }

  const ModelDims& dims() const noexcept { return dims_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  std::vector<double>& params() noexcept { return params_; }
  const std::vector<double>& params() const noexcept { return params_; }

  /// Full-input mode maps surface forms through this vocabulary (all training forms).
  const std::optional<Vocabulary>& encoder_vocab() const noexcept { return encoder_vocab_; }
  void set_encoder_vocab(Vocabulary v) { encoder_vocab_ = std::move(v); }

  int bos_token() const noexcept { return static_cast<int>(dims_.encoder_vocab) - 2; }
  int eos_token() const noexcept { return static_cast<int>(dims_.encoder_vocab) - 1; }

  Eigen::Map<const Eigen::MatrixXd> block(const ParameterLayout::Block& b) const {
    return {params_.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
  }

 private:
  ModelDims dims_;
  ParameterLayout layout_;
  std::vector<double> params_;
  std::optional<Vocabulary> encoder_vocab_;
};

inline Eigen::Map<Eigen::MatrixXd> grad_block(std::span<double> g, const ParameterLayout::Block& b) {
  return {g.data() + b.offset, static_cast<Eigen::Index>(b.rows), static_cast<Eigen::Index>(b.cols)};
}

/// Builds dimensions for a parser vocabulary. For full-input internal encoding the
/// encoder vocabulary covers every training form (min count 1).
inline ModelDims make_dims(const Vocabulary& parser_vocab, EncoderMode mode, InputMode input,
                           const Vocabulary* encoder_vocab, std::size_t embed_dim = 64, std::size_t hidden_dim = 256) {
  ModelDims d;
  d.mode = mode;
  d.input = input;
  d.word_classes = parser_vocab.size();
  d.labels = parser_vocab.labels().size();
  d.embed_dim = embed_dim;
  d.hidden_dim = hidden_dim;
  if (mode == EncoderMode::internal) {
    std::size_t tokens = (input == InputMode::generative || !encoder_vocab) ? parser_vocab.size() : encoder_vocab->size();
    d.encoder_vocab = tokens + 2;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Prefix encodings

/// Column t holds the encoding of the prefix ending at position t: 0 = BOS,
/// 1..n the tokens, n+1 the end-of-sentence symbol when the sentence is complete.
struct PrefixEncoding {
  Eigen::MatrixXd vectors;

  Eigen::Index positions() const noexcept { return vectors.cols(); }
  /// Tokens encoded so far (BOS and EOS excluded).
  std::size_t token_count(bool complete) const noexcept {
    return static_cast<std::size_t>(vectors.cols()) - (complete ? 2 : 1);
  }
};

/// Encoder token ids for surface forms: parser word classes in generative mode,
/// the full-form encoder vocabulary otherwise.
inline std::vector<int> encoder_tokens(const Model& m, const Vocabulary& parser_vocab,
                                       const std::vector<std::string>& words) {
  if (m.dims().input == InputMode::full_input && m.encoder_vocab()) return m.encoder_vocab()->lookup(words);
  return parser_vocab.lookup(words);
}

namespace detail {

/// Elman recurrence h_t = tanh(W_in e(x_t) + W_rec h_{t-1} + b) over BOS, tokens, [EOS].
inline Eigen::MatrixXd run_recurrence(const Model& m, std::span<const int> tokens, bool complete) {
  const auto& L = m.layout();
  const auto E = m.block(L.embed);
  const auto W_in = m.block(L.w_in);
  const auto W_rec = m.block(L.w_rec);
  const auto b = m.block(L.b_rec);
  const Eigen::Index steps = static_cast<Eigen::Index>(tokens.size()) + 1 + (complete ? 1 : 0);
  Eigen::MatrixXd H(static_cast<Eigen::Index>(m.dims().hidden_dim), steps);
  Eigen::VectorXd prev = Eigen::VectorXd::Zero(H.rows());
  for (Eigen::Index t = 0; t < steps; ++t) {
    int tok = t == 0 ? m.bos_token()
              : (t <= static_cast<Eigen::Index>(tokens.size())) ? tokens[static_cast<std::size_t>(t - 1)]
                                                                  : m.eos_token();
    if (tok < 0 || tok >= static_cast<int>(m.dims().encoder_vocab))
      throw ContractViolation("encoder token id out of range");
    Eigen::VectorXd z = W_in * E.col(tok) + W_rec * prev + b.col(0);
    H.col(t) = z.array().tanh();
    prev = H.col(t);
  }
  return H;
}

}  // namespace detail

/// Internal encoder over encoder token ids. Column t depends only on tokens[0..t).
inline PrefixEncoding encode_prefix(const Model& m, std::span<const int> tokens, bool complete) {
  if (m.dims().mode != EncoderMode::internal) throw ConfigError("encode_prefix: model uses external encodings");
  return {detail::run_recurrence(m, tokens, complete)};
}

inline PrefixEncoding encode_prefix(const Model& m, const Vocabulary& parser_vocab,
                                    const std::vector<std::string>& words, bool complete) {
  auto ids = encoder_tokens(m, parser_vocab, words);
  return encode_prefix(m, ids, complete);
}

/// External encoder: `word_vectors` is d x n (one column per word); only the first
/// `count` words are exposed.
inline PrefixEncoding encode_prefix_external(const Model& m, const Eigen::MatrixXd& word_vectors, std::size_t count,
                                             bool complete) {
  if (m.dims().mode != EncoderMode::external) throw ConfigError("encode_prefix_external: model uses the internal encoder");
  if (static_cast<std::size_t>(word_vectors.rows()) != m.dims().hidden_dim)
    throw ConfigError("external encoding dimension " + std::to_string(word_vectors.rows()) +
                      " does not match model dimension " + std::to_string(m.dims().hidden_dim));
  if (count > static_cast<std::size_t>(word_vectors.cols())) throw LookupError("external encodings cover fewer tokens than requested");
  const auto& L = m.layout();
  PrefixEncoding enc;
  enc.vectors.resize(word_vectors.rows(), static_cast<Eigen::Index>(count) + 1 + (complete ? 1 : 0));
  enc.vectors.col(0) = m.block(L.bos).col(0);
  enc.vectors.middleCols(1, static_cast<Eigen::Index>(count)) = word_vectors.leftCols(static_cast<Eigen::Index>(count));
  if (complete) enc.vectors.col(enc.vectors.cols() - 1) = m.block(L.eos).col(0);
  return enc;
}

/// Precomputed per-word encodings (one file per encoder layer).
///
/// CSV layout: repeated blocks of a `sentence_id,n_tokens,d` line followed by
/// n_tokens lines of d comma-separated values.
/// Binary layout (little-endian): magic "SSENC001", then repeated records of
/// int64 sentence_id, uint32 n_tokens, uint32 d, float32[n_tokens * d] row-major.
class ExternalEncodings {
 public:
  std::size_t dimension() const noexcept { return d_; }
  std::size_t sentences() const noexcept { return table_.size(); }

  /// d x n matrix for a sentence.
  const Eigen::MatrixXd& at(std::int64_t sentence_id) const {
    auto it = table_.find(sentence_id);
    if (it == table_.end()) throw LookupError("no external encodings for sentence " + std::to_string(sentence_id));
    return it->second;
  }

  void add(std::int64_t sentence_id, Eigen::MatrixXd vectors) {
    if (d_ == 0) d_ = static_cast<std::size_t>(vectors.rows());
    if (static_cast<std::size_t>(vectors.rows()) != d_) throw ConfigError("inconsistent external encoding dimension");
    table_[sentence_id] = std::move(vectors);
  }

  static ExternalEncodings load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LookupError("cannot open external encodings " + path);
    char magic[8] = {};
    in.read(magic, 8);
    if (in && std::memcmp(magic, "SSENC001", 8) == 0) return load_binary(in);
    in.clear();
    in.seekg(0);
    return load_csv(in);
  }

  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    for (const auto& [id, m] : table_) {
      out << id << ',' << m.cols() << ',' << m.rows() << '\n';
      for (Eigen::Index t = 0; t < m.cols(); ++t) {
        for (Eigen::Index k = 0; k < m.rows(); ++k) out << (k ? "," : "") << csv::format(m(k, t));
        out << '\n';
      }
    }
  }

  void save_binary(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    out.write("SSENC001", 8);
    for (const auto& [id, m] : table_) {
      std::int64_t sid = id;
      auto n = static_cast<std::uint32_t>(m.cols()), d = static_cast<std::uint32_t>(m.rows());
      out.write(reinterpret_cast<const char*>(&sid), 8);
      out.write(reinterpret_cast<const char*>(&n), 4);
      out.write(reinterpret_cast<const char*>(&d), 4);
      for (Eigen::Index t = 0; t < m.cols(); ++t)
        for (Eigen::Index k = 0; k < m.rows(); ++k) {
          auto v = static_cast<float>(m(k, t));
          out.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
  }

 private:
  static ExternalEncodings load_binary(std::istream& in) {
    ExternalEncodings e;
    while (true) {
      std::int64_t sid;
      std::uint32_t n, d;
      if (!in.read(reinterpret_cast<char*>(&sid), 8)) break;
      if (!in.read(reinterpret_cast<char*>(&n), 4) || !in.read(reinterpret_cast<char*>(&d), 4))
        throw ParseError("truncated external encoding record header");
      std::vector<float> buf(static_cast<std::size_t>(n) * d);
      if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4)))
        throw ParseError("truncated external encoding record");
      Eigen::MatrixXd m(d, n);
      for (std::uint32_t t = 0; t < n; ++t)
        for (std::uint32_t k = 0; k < d; ++k) m(k, t) = buf[static_cast<std::size_t>(t) * d + k];
      e.add(sid, std::move(m));
    }
    return e;
  }

  static ExternalEncodings load_csv(std::istream& in) {
    ExternalEncodings e;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto head = csv::split(line);
      if (head.size() != 3) throw ParseError("expected 'sentence_id,n_tokens,d' header", lineno);
      auto sid = static_cast<std::int64_t>(csv::to_double(head[0], lineno));
      auto n = static_cast<Eigen::Index>(csv::to_double(head[1], lineno));
      auto d = static_cast<Eigen::Index>(csv::to_double(head[2], lineno));
      Eigen::MatrixXd m(d, n);
      for (Eigen::Index t = 0; t < n; ++t) {
        if (!std::getline(in, line)) throw ParseError("truncated external encoding block", lineno);
        ++lineno;
        auto f = csv::split(line);
        if (static_cast<Eigen::Index>(f.size()) != d) throw ParseError("dimension mismatch in external encoding row", lineno);
        for (Eigen::Index k = 0; k < d; ++k) m(k, t) = csv::to_double(f[static_cast<std::size_t>(k)], lineno);
      }
      e.add(sid, std::move(m));
    }
    return e;
  }

  std::size_t d_ = 0;
  std::map<std::int64_t, Eigen::MatrixXd> table_;
};

// ---------------------------------------------------------------------------
// Classifiers

namespace detail {

inline void softmax_inplace(Eigen::Ref<Eigen::VectorXd> v) {
  double mx = v.maxCoeff();
  v = (v.array() - mx).exp();
  v /= v.sum();
}

/// Pairwise probabilities that sum to exactly 1: the smaller is kept, the larger is its complement.
inline void complement(double a, double b, double& pa, double& pb) {
  if (a <= b) {
    pa = a;
    pb = 1.0 - a;
  } else {
    pb = b;
    pa = 1.0 - b;
  }
}

inline Eigen::VectorXd features(const Model& m, const PrefixEncoding& enc, int top, int front) {
  if (front < 0 || front >= enc.positions())
    throw ContractViolation("score: buffer front " + std::to_string(front) + " beyond encoded prefix");
  if (top < 0 || top >= enc.positions()) throw ContractViolation("score: stack top beyond encoded prefix");
  const auto h = static_cast<Eigen::Index>(m.dims().hidden_dim);
  Eigen::VectorXd x(2 * h);
  x.head(h) = top == 0 ? Eigen::VectorXd(m.block(m.layout().null_top).col(0)) : Eigen::VectorXd(enc.vectors.col(top));
  x.tail(h) = enc.vectors.col(front);
  return x;
}

}  // namespace detail

/// Scores for stack top `top` (0 = empty stack) and buffer front `front`.
inline ScoreBundle score(const Model& m, const PrefixEncoding& enc, int top, int front) {
  const auto& L = m.layout();
  Eigen::VectorXd x = detail::features(m, enc, top, front);
  ScoreBundle s;
  Eigen::VectorXd tr = m.block(L.w_tr) * x + m.block(L.b_tr).col(0);
  detail::softmax_inplace(tr);
  detail::complement(tr(0), tr(1), s.p_shift, s.p_reduce);
  Eigen::VectorXd dir = m.block(L.w_dir) * x + m.block(L.b_dir).col(0);
  detail::softmax_inplace(dir);
  detail::complement(dir(0), dir(1), s.p_left, s.p_right);
  if (m.dims().labels > 0) {
    Eigen::VectorXd lab = m.block(L.w_lab) * x + m.block(L.b_lab).col(0);
    detail::softmax_inplace(lab);
    s.label_dist.assign(lab.data(), lab.data() + lab.size());
  }
  Eigen::VectorXd word = m.block(L.w_word) * x + m.block(L.b_word).col(0);
  detail::softmax_inplace(word);
  s.word_dist.assign(word.data(), word.data() + word.size());
  return s;
}

inline ScoreBundle score(const ParserConfiguration& c, const PrefixEncoding& enc, const Model& m) {
  return score(m, enc, c.top(), c.buffer_front());
}

/// Memoising scorer over one sentence's encoding; scores depend only on (top, front).
/// Not thread-safe; use one per thread.
class ModelScorer {
 public:
  ModelScorer(const Model& m, PrefixEncoding enc) : model_(&m), enc_(std::move(enc)) {
    const auto p = static_cast<std::size_t>(enc_.positions());
    cache_.resize(p * p);
  }

  const ScoreBundle& operator()(int top, int front) const {
    const auto p = static_cast<std::size_t>(enc_.positions());
    if (top < 0 || front < 0 || static_cast<std::size_t>(top) >= p || static_cast<std::size_t>(front) >= p)
      throw ContractViolation("ModelScorer: position beyond encoded prefix");
    auto& slot = cache_[static_cast<std::size_t>(top) * p + static_cast<std::size_t>(front)];
    if (!slot) slot = score(*model_, enc_, top, front);
    return *slot;
  }

  const PrefixEncoding& encoding() const noexcept { return enc_; }

 private:
  const Model* model_;
  PrefixEncoding enc_;
  mutable std::vector<std::optional<ScoreBundle>> cache_;
};

// ---------------------------------------------------------------------------
// Training objective

/// One oracle-annotated sentence.
struct TrainingExample {
  std::vector<int> encoder_tokens;            // internal encoder input
  const Eigen::MatrixXd* external = nullptr;  // d x n, external encoder input
  std::vector<int> words;                     // parser word classes w_1..w_n
  std::vector<Action> oracle;
};

/// Negative log-likelihood (nats) of the oracle derivation, summing the transition,
/// direction, label and word factors along the path, and its exact gradient.
/// `grad` (if non-empty) is incremented by `grad_scale` times the gradient.
/// Dropout (p = 0.5) is applied to the encodings when `dropout_rng` is non-null.
inline double nll_loss(const Model& m, const TrainingExample& ex, std::span<double> grad = {},
                       std::mt19937_64* dropout_rng = nullptr, bool use_labels = true, double grad_scale = 1.0) {
  const auto& L = m.layout();
  const auto& dims = m.dims();
  const int n = static_cast<int>(ex.words.size());
  const auto h = static_cast<Eigen::Index>(dims.hidden_dim);
  const bool want_grad = !grad.empty();

  PrefixEncoding enc;
  if (dims.mode == EncoderMode::internal)
    enc = encode_prefix(m, ex.encoder_tokens, true);
  else
    enc = encode_prefix_external(m, *ex.external, static_cast<std::size_t>(n), true);
  const Eigen::Index P = enc.positions();

  // Dropout masks per position (column P is the null vector); values in {0, 2}.
  Eigen::MatrixXd mask;
  if (dropout_rng) {
    mask.resize(h, P + 1);
    std::bernoulli_distribution keep(0.5);
    for (Eigen::Index c = 0; c <= P; ++c)
      for (Eigen::Index r = 0; r < h; ++r) mask(r, c) = keep(*dropout_rng) ? 2.0 : 0.0;
  }
  const Eigen::VectorXd null_vec = m.block(L.null_top).col(0);
  auto column = [&](int pos) -> Eigen::VectorXd {
    Eigen::VectorXd v = pos == 0 ? null_vec : Eigen::VectorXd(enc.vectors.col(pos));
    if (dropout_rng) v.array() *= mask.col(pos == 0 ? P : pos).array();
    return v;
  };
  auto front_column = [&](int pos) -> Eigen::VectorXd {
    Eigen::VectorXd v = enc.vectors.col(pos);
    if (dropout_rng) v.array() *= mask.col(pos).array();
    return v;
  };

  Eigen::MatrixXd dH;
  Eigen::VectorXd dnull;
  if (want_grad) {
    dH = Eigen::MatrixXd::Zero(h, P);
    dnull = Eigen::VectorXd::Zero(h);
  }

  double loss = 0.0;
  // Softmax cross-entropy for one head; `classes` limits the support (masking trailing entries).
  auto head_event = [&](const ParameterLayout::Block& W, const ParameterLayout::Block& b, const Eigen::VectorXd& x,
                        int target, Eigen::Index classes, Eigen::VectorXd* dx) {
    Eigen::VectorXd logits = m.block(W).topRows(classes) * x + m.block(b).col(0).head(classes);
    detail::softmax_inplace(logits);
    loss -= std::log(logits(target));
    if (!want_grad) return;
    logits(target) -= 1.0;
    logits *= grad_scale;
    grad_block(grad, W).topRows(classes).noalias() += logits * x.transpose();
    grad_block(grad, b).col(0).head(classes) += logits;
    dx->noalias() += m.block(W).topRows(classes).transpose() * logits;
  };
  auto scatter = [&](int top, int front, const Eigen::VectorXd& dx) {
    Eigen::VectorXd a = dx.head(h), b = dx.tail(h);
    if (dropout_rng) {
      a.array() *= mask.col(top == 0 ? P : top).array();
      b.array() *= mask.col(front).array();
    }
    if (top == 0)
      dnull += a;
    else
      dH.col(top) += a;
    dH.col(front) += b;
  };

  const auto out_classes = static_cast<Eigen::Index>(dims.output_classes());
  const int eos = static_cast<int>(dims.word_classes);

  // First word, generated from (null, BOS) with EOS masked.
  {
    Eigen::VectorXd x(2 * h);
    x << column(0), front_column(0);
    Eigen::VectorXd dx = Eigen::VectorXd::Zero(2 * h);
    head_event(L.w_word, L.b_word, x, ex.words.at(0), out_classes - 1, &dx);
    if (want_grad) scatter(0, 0, dx);
  }

  auto c = initial_config(n);
  for (const Action& a : ex.oracle) {
    const auto legal = legal_actions(c);
    const int top = c.top(), front = c.buffer_front();
    Eigen::VectorXd x(2 * h);
    x << column(top), front_column(front);
    Eigen::VectorXd dx = Eigen::VectorXd::Zero(2 * h);
    bool used = false;
    if (a.kind == ActionKind::Shift) {
      if (legal.reduce()) {
        head_event(L.w_tr, L.b_tr, x, 0, 2, &dx);
        used = true;
      }
      int next = front < n ? ex.words[static_cast<std::size_t>(front)] : eos;
      head_event(L.w_word, L.b_word, x, next, out_classes, &dx);
      used = true;
    } else {
      if (legal.shift) {
        head_event(L.w_tr, L.b_tr, x, 1, 2, &dx);
        used = true;
      }
      if (legal.left && legal.right) {
        head_event(L.w_dir, L.b_dir, x, a.kind == ActionKind::LeftArc ? 0 : 1, 2, &dx);
        used = true;
      }
      if (use_labels && a.label >= 0 && dims.labels > 0) {
        head_event(L.w_lab, L.b_lab, x, a.label, static_cast<Eigen::Index>(dims.labels), &dx);
        used = true;
      }
    }
    if (want_grad && used) scatter(top, front, dx);
    c = apply(c, a);
  }
  if (!std::isfinite(loss)) throw TrainingError("non-finite loss");
  if (!want_grad) return loss;

  grad_block(grad, L.null_top).col(0) += dnull;
  if (dims.mode == EncoderMode::external) {
    grad_block(grad, L.bos).col(0) += dH.col(0);
    grad_block(grad, L.eos).col(0) += dH.col(P - 1);
    return loss;
  }

  // Backpropagation through time.
  const auto E = m.block(L.embed);
  const auto W_in = m.block(L.w_in);
  const auto W_rec = m.block(L.w_rec);
  auto gE = grad_block(grad, L.embed);
  auto gW_in = grad_block(grad, L.w_in);
  auto gW_rec = grad_block(grad, L.w_rec);
  auto gb = grad_block(grad, L.b_rec);
  Eigen::VectorXd carry = Eigen::VectorXd::Zero(h);
  for (Eigen::Index t = P - 1; t >= 0; --t) {
    int tok = t == 0 ? m.bos_token() : (t <= n ? ex.encoder_tokens[static_cast<std::size_t>(t - 1)] : m.eos_token());
    Eigen::VectorXd dh = dH.col(t) + carry;
    Eigen::VectorXd dz = dh.array() * (1.0 - enc.vectors.col(t).array().square());
    gW_in.noalias() += dz * E.col(tok).transpose();
    gE.col(tok).noalias() += W_in.transpose() * dz;
    gb.col(0) += dz;
    if (t > 0) {
      gW_rec.noalias() += dz * enc.vectors.col(t - 1).transpose();
      carry.noalias() = W_rec.transpose() * dz;
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: magic "SSCKPT01", uint64 metadata length, metadata JSON (dims, parser
// vocabulary, its hash, optional encoder vocabulary, user fields), uint64
// parameter count, float64 parameters (little-endian).

struct Checkpoint {
  Model model;
  Vocabulary vocab;
  nlohmann::json meta;
};

inline void save_checkpoint(const std::string& path, const Model& m, const Vocabulary& vocab,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json meta = extra;
  meta["format_version"] = 1;
  meta["dims"] = m.dims();
  meta["vocab"] = vocab.to_json();
  meta["vocab_hash"] = vocab.hash();
  if (m.encoder_vocab()) meta["encoder_vocab"] = m.encoder_vocab()->to_json();
  std::string text = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write("SSCKPT01", 8);
  std::uint64_t len = text.size(), count = m.params().size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(len));
  out.write(reinterpret_cast<const char*>(&count), 8);
  out.write(reinterpret_cast<const char*>(m.params().data()), static_cast<std::streamsize>(count * sizeof(double)));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LookupError("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "SSCKPT01", 8) != 0) throw ParseError(path + ": not a checkpoint file");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Checkpoint ck;
  ck.meta = nlohmann::json::parse(text);
  ck.vocab = Vocabulary::from_json(ck.meta.at("vocab"));
  if (ck.meta.at("vocab_hash").get<std::uint64_t>() != ck.vocab.hash())
    throw ValidationError(path + ": vocabulary hash does not match stored vocabulary");
  ck.model = Model::zeros(ck.meta.at("dims").get<ModelDims>());
  if (ck.meta.contains("encoder_vocab")) ck.model.set_encoder_vocab(Vocabulary::from_json(ck.meta["encoder_vocab"]));
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  if (count != ck.model.params().size()) throw ParseError(path + ": parameter count does not match dimensions");
  in.read(reinterpret_cast<char*>(ck.model.params().data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw ParseError(path + ": truncated parameters");
  return ck;
}

/// FNV-1a over the parameter bytes; equal hashes mean bit-identical parameters.
inline std::uint64_t parameter_hash(const Model& m) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.params().data());
  for (std::size_t i = 0; i < m.params().size() * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace synsurp
