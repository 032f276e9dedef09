#pragma once

// Oracle-path training with plain SGD.
//
// Each epoch buckets sentences by length, shuffles within buckets, cuts batches
// inside buckets and shuffles the batch order, all from one seeded generator.
// A batch step averages sentence losses, clips the global gradient norm and
// applies lr(epoch) = lr0 / decay^max(0, epoch - decay_after).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synsurp/csv.hpp"
#include "synsurp/error.hpp"
#include "synsurp/evaluation.hpp"
#include "synsurp/path_search.hpp"
#include "synsurp/scoring.hpp"
#include "synsurp/transition_system.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp {

struct TrainConfig {
  std::size_t batch_size = 16;
  int epochs = 30;
  double lr0 = 1.0;
  double decay = 1.7;
  int decay_after = 6;
  double grad_clip_norm = 5.0;
  std::uint64_t seed = 1;
  bool dropout = true;
  bool use_labels = true;
  bool exclude_punct = false;  // dev scoring
  std::string out_dir;         // empty: no checkpoints or log on disk

  void validate() const {
    if (batch_size == 0 || epochs <= 0 || !(lr0 > 0) || !(grad_clip_norm > 0) || decay_after < 0)
      throw ConfigError("training settings must be positive");
    if (!(decay > 1)) throw ConfigError("learning-rate decay must be > 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"epochs", c.epochs},   {"lr0", c.lr0},
       {"decay", c.decay},           {"decay_after", c.decay_after}, {"grad_clip_norm", c.grad_clip_norm},
       {"seed", c.seed},             {"dropout", c.dropout}, {"use_labels", c.use_labels},
       {"exclude_punct", c.exclude_punct}};
}

/// Learning rate for a 1-based epoch.
inline double learning_rate(const TrainConfig& cfg, int epoch) {
  return cfg.lr0 / std::pow(cfg.decay, std::max(0, epoch - cfg.decay_after));
}

/// Batches of sentence indices; every batch holds sentences of a single length.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& lengths,
                                                          std::size_t batch_size, std::mt19937_64& rng) {
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < lengths.size(); ++i) buckets[lengths[i]].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [len, idx] : buckets) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t b = 0; b < idx.size(); b += batch_size)
      batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b),
                           idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), b + batch_size)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

/// Rescales `g` to norm at most `max_norm`; returns the norm before clipping.
inline double clip_gradient(std::span<double> g, double max_norm) {
  double ss = 0.0;
  for (double v : g) ss += v * v;
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (double& v : g) v *= f;
  }
  return norm;
}

/// Oracle-annotated examples for a treebank. External encodings are looked up by
/// sentence index.
inline std::vector<TrainingExample> make_examples(const Model& m, const Vocabulary& vocab,
                                                  const std::vector<Sentence>& sentences,
                                                  const ExternalEncodings* ext = nullptr) {
  std::vector<TrainingExample> out;
  out.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    TrainingExample ex;
    ex.words = vocab.lookup(s.tokens);
    ex.oracle = static_oracle(s, vocab);
    if (m.dims().mode == EncoderMode::internal)
      ex.encoder_tokens = encoder_tokens(m, vocab, s.tokens);
    else {
      if (!ext) throw ConfigError("external encoder mode needs an encodings file");
      ex.external = &ext->at(static_cast<std::int64_t>(i));
      if (static_cast<std::size_t>(ex.external->cols()) < s.size())
        throw LookupError("external encodings for sentence " + std::to_string(i) + " cover fewer tokens than the sentence");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

struct StepStats {
  double loss = 0.0;  // mean sentence loss over the batch, nats
  double norm_before = 0.0;
  double norm_after = 0.0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

/// One SGD step on a batch. The step follows the gradient of the batch loss divided
/// by the batch's token count. `dropout_seed` (if set) seeds per-sentence dropout masks.
inline StepStats sgd_step(Model& m, std::span<const TrainingExample* const> batch, double lr, const TrainConfig& cfg,
                          std::vector<double>& grad, std::optional<std::uint64_t> dropout_seed = std::nullopt) {
  grad.assign(m.params().size(), 0.0);
  StepStats st;
  std::size_t tokens = 0;
  for (const auto* ex : batch) tokens += ex->words.size();
  const double scale = 1.0 / static_cast<double>(tokens);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::optional<std::mt19937_64> rng;
    if (dropout_seed) rng.emplace(detail::mix_seed(*dropout_seed, b));
    st.loss += nll_loss(m, *batch[b], grad, rng ? &*rng : nullptr, cfg.use_labels, scale) / static_cast<double>(batch.size());
  }
  st.norm_before = clip_gradient(grad, cfg.grad_clip_norm);
  if (!std::isfinite(st.norm_before)) throw TrainingError("non-finite gradient");
  double ss = 0.0;
  for (double g : grad) ss += g * g;
  st.norm_after = std::sqrt(ss);
  auto& p = m.params();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
  return st;
}

/// Greedy 1-best trees for `sentences`.
inline std::vector<DependencyTree> greedy_trees(const Model& m, const Vocabulary& vocab,
                                                const std::vector<Sentence>& sentences, bool use_labels = true,
                                                const ExternalEncodings* ext = nullptr) {
  std::vector<DependencyTree> out;
  out.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    auto words = vocab.lookup(s.tokens);
    PrefixEncoding enc = m.dims().mode == EncoderMode::internal
                             ? encode_prefix(m, vocab, s.tokens, true)
                             : encode_prefix_external(m, ext->at(static_cast<std::int64_t>(i)), s.size(), true);
    ModelScorer scorer(m, std::move(enc));
    out.push_back(greedy_parse(std::span<const int>(words), scorer, use_labels).tree);
  }
  return out;
}

/// Top-1 tree from the pooled search (ranked by full probability after finalize).
inline std::vector<DependencyTree> pool_trees(const Model& m, const Vocabulary& vocab,
                                              const std::vector<Sentence>& sentences, const SearchOptions& opt,
                                              const ExternalEncodings* ext = nullptr) {
  std::vector<DependencyTree> out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const auto& s = sentences[i];
    auto words = vocab.lookup(s.tokens);
    PrefixEncoding enc = m.dims().mode == EncoderMode::internal
                             ? encode_prefix(m, vocab, s.tokens, true)
                             : encode_prefix_external(m, ext->at(static_cast<std::int64_t>(i)), s.size(), true);
    ModelScorer scorer(m, std::move(enc));
    auto pools = pool_trajectory(std::span<const int>(words), scorer, opt);
    auto done = finalize(pools.back(), scorer, opt);
    out.push_back(done.front().tree);
  }
  return out;
}

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;  // mean sentence loss, nats
  AttachmentReport dev;
  double lr = 0.0;
  std::string checkpoint;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<std::string> checkpoints;
};

/// Called after every epoch; returning false stops training.
using EpochCallback = std::function<bool(const EpochRecord&, const Model&)>;

inline std::string checkpoint_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%03d.ckpt", epoch);
  return buf;
}

inline void write_log_header(std::ostream& out) { out << "epoch,loss,dev_las,dev_uas,label_acc,lr\n"; }

inline void write_log_row(std::ostream& out, const EpochRecord& r) {
  out << r.epoch << ',' << csv::format(r.loss) << ',' << csv::format(r.dev.las) << ',' << csv::format(r.dev.uas) << ','
      << csv::format(r.dev.label_acc) << ',' << csv::format(r.lr) << '\n';
}

/// Trains `m` in place. Writes `epoch_NNN.ckpt` and `train_log.csv` under
/// cfg.out_dir when it is set.
inline TrainResult train(Model& m, const Vocabulary& vocab, const std::vector<Sentence>& train_set,
                         const std::vector<Sentence>& dev_set, const TrainConfig& cfg, const EpochCallback& on_epoch = {},
                         const ExternalEncodings* train_ext = nullptr, const ExternalEncodings* dev_ext = nullptr) {
  cfg.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");
  const auto examples = make_examples(m, vocab, train_set, train_ext);
  std::vector<std::size_t> lengths;
  for (const auto& s : train_set) lengths.push_back(s.size());

  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    log.open(std::filesystem::path(cfg.out_dir) / "train_log.csv");
    if (!log) throw Error("cannot write training log in " + cfg.out_dir);
    write_log_header(log);
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<double> grad;
  TrainResult result;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    const auto batches = make_batches(lengths, cfg.batch_size, rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      std::vector<const TrainingExample*> batch;
      for (auto i : batches[b]) batch.push_back(&examples[i]);
      StepStats st;
      try {
        std::optional<std::uint64_t> ds;
        if (cfg.dropout) ds = detail::mix_seed(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) | b);
        st = sgd_step(m, batch, lr, cfg, grad, ds);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " in epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      if (!std::isfinite(st.loss))
        throw TrainingError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      loss_sum += st.loss * static_cast<double>(batch.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.loss = loss_sum / static_cast<double>(train_set.size());
    if (!dev_set.empty())
      rec.dev = attachment_scores(greedy_trees(m, vocab, dev_set, cfg.use_labels, dev_ext), dev_set, vocab.labels(),
                                  cfg.exclude_punct);
    if (!cfg.out_dir.empty()) {
      rec.checkpoint = (std::filesystem::path(cfg.out_dir) / checkpoint_name(epoch)).string();
      nlohmann::json extra = {{"epoch", epoch},         {"loss", rec.loss},   {"lr", lr},
                              {"dev_las", rec.dev.las}, {"dev_uas", rec.dev.uas}, {"label_acc", rec.dev.label_acc},
                              {"train", cfg}};
      save_checkpoint(rec.checkpoint, m, vocab, extra);
      result.checkpoints.push_back(rec.checkpoint);
      write_log_row(log, rec);
      log.flush();
    }
    result.epochs.push_back(rec);
    if (on_epoch && !on_epoch(rec, m)) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint selection

enum class SelectCriterion { dev_accuracy, r2_fit };

struct CheckpointScore {
  std::string path;
  int epoch = 0;
  double dev_las = 0.0;
  double dev_uas = 0.0;
  std::optional<double> r2_increase;  // mean over the region mask
};

struct Selection {
  std::vector<CheckpointScore> scores;
  std::size_t chosen = 0;  // index into scores
};

inline CheckpointScore read_checkpoint_score(const std::string& path) {
  auto ck = load_checkpoint(path);
  CheckpointScore s;
  s.path = path;
  s.epoch = ck.meta.value("epoch", 0);
  s.dev_las = ck.meta.value("dev_las", 0.0);
  s.dev_uas = ck.meta.value("dev_uas", 0.0);
  return s;
}

/// First index maximising `key`.
template <class Key>
std::size_t argmax_index(const std::vector<CheckpointScore>& scores, Key key) {
  if (scores.empty()) throw ValidationError("no checkpoints to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (key(scores[i]) > key(scores[best])) best = i;
  return best;
}

/// Highest dev LAS (earliest epoch on ties).
inline Selection select_by_dev_accuracy(const std::vector<std::string>& checkpoints) {
  if (checkpoints.empty()) throw ValidationError("no checkpoints to select from");
  Selection sel;
  for (const auto& p : checkpoints) sel.scores.push_back(read_checkpoint_score(p));
  sel.chosen = argmax_index(sel.scores, [](const CheckpointScore& s) { return s.dev_las; });
  return sel;
}

}  // namespace synsurp
