#pragma once

// Glue between the parser and the regression statistics: profiling a text into
// surprisal series, building control designs from stimulus files, comparing two
// regressors across subjects, and choosing a checkpoint by fit to BOLD data.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "synsurp/neuro_regression.hpp"
#include "synsurp/path_search.hpp"
#include "synsurp/scoring.hpp"
#include "synsurp/surprisal.hpp"
#include "synsurp/trainer.hpp"
#include "synsurp/treebank_io.hpp"

namespace synsurp {

/// Surprisal series over a text, one sentence at a time (pools reset at sentence
/// boundaries). `opt.labels` is taken from the model.
inline SurprisalSeries profile_text(const Model& m, const Vocabulary& vocab,
                                    const std::vector<std::vector<std::string>>& sentences,
                                    const std::vector<std::size_t>& k_list, SearchOptions opt,
                                    const ExternalEncodings* ext = nullptr) {
  SurprisalSeries series;
  series.k_list = k_list;
  opt.labels = opt.use_labels ? m.dims().labels : 0;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& toks = sentences[s];
    if (toks.empty()) continue;
    auto words = vocab.lookup(toks);
    PrefixEncoding enc;
    if (m.dims().mode == EncoderMode::internal)
      enc = encode_prefix(m, vocab, toks, true);
    else {
      if (!ext) throw ConfigError("external encoder mode needs an encodings file");
      enc = encode_prefix_external(m, ext->at(static_cast<std::int64_t>(s)), toks.size(), true);
    }
    ModelScorer scorer(m, std::move(enc));
    append_sentence(series, toks, std::span<const int>(words), scorer, opt, s);
  }
  return series;
}

/// Stimulus inputs for the control regressors; absent features are skipped.
struct ControlInputs {
  StimulusAlignment alignment;
  std::optional<FrequencyTable> frequency;
  std::optional<FeatureSeries> f0;
  std::optional<FeatureSeries> rms;
};

/// Intercept, word rate, and whichever of word frequency, f0 and RMS are present.
inline DesignMatrix control_design(const ControlInputs& in, const HrfSpec& hrf, double tr, std::size_t T) {
  DesignMatrix d(T);
  d.add("word_rate", convolve_and_sample(word_rate_events(in.alignment), hrf, tr, T));
  if (in.frequency) d.add("word_frequency", convolve_and_sample(word_frequency_events(in.alignment, *in.frequency), hrf, tr, T));
  if (in.f0) d.add("f0", convolve_and_sample(feature_events(*in.f0), hrf, tr, T));
  if (in.rms) d.add("rms", convolve_and_sample(feature_events(*in.rms), hrf, tr, T));
  return d;
}

struct Comparison {
  std::vector<Eigen::VectorXd> inc_a;  // per subject
  std::vector<Eigen::VectorXd> inc_b;
  TMap tmap;  // b - a
  ClusterTable clusters;
};

inline void check_panels(const std::vector<BoldPanel>& subjects, std::size_t scans) {
  if (subjects.empty()) throw ValidationError("no subjects");
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    if (!(subjects[s].grid == subjects[0].grid))
      throw ValidationError("voxel grid of subject " + std::to_string(s) + " differs from subject 0");
    if (subjects[s].scans() != scans)
      throw ValidationError("subject " + std::to_string(s) + " has " + std::to_string(subjects[s].scans()) +
                            " scans, design has " + std::to_string(scans));
    if (subjects[s].section_starts != subjects[0].section_starts)
      throw ValidationError("section boundaries of subject " + std::to_string(s) + " differ from subject 0");
  }
}

/// Per-subject r^2 increase of regressors a and b over the controls, the paired
/// t-map of b - a, and its clusters.
inline Comparison compare_regressors(const DesignMatrix& controls, const std::string& name_a, const Eigen::VectorXd& col_a,
                                     const std::string& name_b, const Eigen::VectorXd& col_b,
                                     const std::vector<BoldPanel>& subjects, double p_thresh = 0.001,
                                     std::size_t min_size = 15) {
  check_panels(subjects, controls.scans());
  Comparison c;
  for (const auto& subj : subjects) {
    const auto folds = subj.sections();
    const Eigen::VectorXd base = cv_r2_map(controls, subj.data, folds);
    c.inc_a.push_back(cv_r2_map(controls.with(name_a, col_a), subj.data, folds) - base);
    c.inc_b.push_back(cv_r2_map(controls.with(name_b, col_b), subj.data, folds) - base);
  }
  c.tmap = paired_t_map(c.inc_a, c.inc_b);
  c.clusters = cluster_threshold(c.tmap.z, subjects[0].grid, p_thresh, min_size);
  return c;
}

/// Scans needed to reach the last word offset.
inline std::size_t scans_for(const StimulusAlignment& a, double tr) {
  if (a.entries.empty()) return 0;
  return static_cast<std::size_t>(std::ceil(a.entries.back().offset / tr)) + 1;
}

/// Data for choosing a checkpoint by fit to BOLD data.
struct R2FitData {
  std::vector<std::vector<std::string>> sentences;  // stimulus text
  StimulusAlignment alignment;
  DesignMatrix controls;
  std::vector<BoldPanel> subjects;
  std::vector<std::size_t> region;  // voxel indices; empty = all voxels
  HrfSpec hrf;
  std::size_t k = 5;
  SearchOptions search;
};

/// Mean r^2 increase (over subjects and region voxels) of the checkpoint's SynS_k.
inline double mean_r2_increase(const Model& m, const Vocabulary& vocab, const R2FitData& data) {
  check_panels(data.subjects, data.controls.scans());
  const auto series = profile_text(m, vocab, data.sentences, {data.k}, data.search);
  const auto rows = emit_regressor(series, data.alignment, data.k);
  const double tr = data.subjects[0].tr;
  const auto col = convolve_and_sample(regressor_events(rows), data.hrf, tr, data.controls.scans());
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& subj : data.subjects) {
    Eigen::MatrixXd Y;
    if (data.region.empty())
      Y = subj.data;
    else {
      Y.resize(subj.data.rows(), static_cast<Eigen::Index>(data.region.size()));
      for (std::size_t i = 0; i < data.region.size(); ++i)
        Y.col(static_cast<Eigen::Index>(i)) = subj.data.col(static_cast<Eigen::Index>(data.region[i]));
    }
    const Eigen::VectorXd inc = r2_increase(data.controls, "syn_k" + std::to_string(data.k), col, Y, subj.sections());
    total += inc.sum();
    count += static_cast<std::size_t>(inc.size());
  }
  return total / static_cast<double>(count);
}

/// Highest mean r^2 increase over the region (earliest epoch on ties).
inline Selection select_by_r2_fit(const std::vector<std::string>& checkpoints, const R2FitData& data) {
  if (checkpoints.empty()) throw ValidationError("no checkpoints to select from");
  Selection sel;
  for (const auto& p : checkpoints) {
    auto ck = load_checkpoint(p);
    CheckpointScore s;
    s.path = p;
    s.epoch = ck.meta.value("epoch", 0);
    s.dev_las = ck.meta.value("dev_las", 0.0);
    s.dev_uas = ck.meta.value("dev_uas", 0.0);
    s.r2_increase = mean_r2_increase(ck.model, ck.vocab, data);
    sel.scores.push_back(s);
  }
  sel.chosen = argmax_index(sel.scores, [](const CheckpointScore& s) { return *s.r2_increase; });
  return sel;
}

inline Selection select_checkpoint(const std::vector<std::string>& checkpoints, SelectCriterion criterion,
                                   const R2FitData* data = nullptr) {
  if (criterion == SelectCriterion::dev_accuracy) return select_by_dev_accuracy(checkpoints);
  if (!data) throw ConfigError("r2_fit selection needs stimulus and BOLD data");
  return select_by_r2_fit(checkpoints, *data);
}

}  // namespace synsurp
