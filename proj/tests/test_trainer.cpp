#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "support.hpp"
#include "synsurp/pipeline.hpp"
#include "synsurp/synthetic.hpp"
#include "synsurp/trainer.hpp"

using namespace synsurp;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Model small_model(const Vocabulary& v, std::uint64_t seed = 3, std::size_t hidden = 32) {
  return Model(make_dims(v, EncoderMode::internal, InputMode::generative, nullptr, hidden / 2, hidden), seed, 0.1);
}

}  // namespace

TEST(Schedule, LearningRate) {
  TrainConfig cfg;
  for (int e = 1; e <= 6; ++e) EXPECT_EQ(learning_rate(cfg, e), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 7), 1.0 / 1.7);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 8), 1.0 / (1.7 * 1.7));
  EXPECT_NEAR(learning_rate(cfg, 8), 0.346, 5e-4);
}

TEST(Schedule, ConfigValidation) {
  TrainConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto bad = ok;
  bad.decay = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.grad_clip_norm = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ok;
  bad.lr0 = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Batches, SingleLengthPartitionAndSeeded) {
  std::mt19937_64 gen(4);
  std::vector<std::size_t> lengths(300);
  for (auto& l : lengths) l = 3 + gen() % 12;
  std::mt19937_64 a(9), b(9);
  auto first = make_batches(lengths, 16, a);
  EXPECT_EQ(first, make_batches(lengths, 16, b));
  std::multiset<std::size_t> covered;
  for (const auto& batch : first) {
    ASSERT_FALSE(batch.empty());
    EXPECT_LE(batch.size(), 16u);
    for (auto i : batch) {
      EXPECT_EQ(lengths[i], lengths[batch[0]]);
      covered.insert(i);
    }
  }
  EXPECT_EQ(covered.size(), lengths.size());
  EXPECT_EQ(std::set<std::size_t>(covered.begin(), covered.end()).size(), lengths.size());
  // The next epoch draws a different order from the same generator.
  EXPECT_NE(first, make_batches(lengths, 16, a));
}

TEST(Clip, NormBoundedAndSmallGradientsUntouched) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> g(40);
    for (auto& x : g) x = nd(rng);
    auto copy = g;
    const double before = clip_gradient(g, 5.0);
    double ss = 0.0;
    for (double x : g) ss += x * x;
    EXPECT_LE(std::sqrt(ss), 5.0 + 1e-9);
    if (before <= 5.0) {
      EXPECT_EQ(g, copy);
    }
  }
}

TEST(Step, ClippedNormAndFiniteLoss) {
  auto data = synthetic::generate_treebank(40, 21);
  auto vocab = build_vocabulary(data, 1);
  auto m = small_model(vocab);
  auto ex = make_examples(m, vocab, data);
  TrainConfig cfg;
  cfg.grad_clip_norm = 0.5;
  std::vector<double> grad;
  std::vector<const TrainingExample*> batch{&ex[0], &ex[1], &ex[2]};
  auto st = sgd_step(m, batch, 1.0, cfg, grad, 11);
  EXPECT_TRUE(std::isfinite(st.loss));
  EXPECT_GT(st.norm_before, 0.0);
  EXPECT_LE(st.norm_after, 0.5 + 1e-9);
}

TEST(Train, DivergenceNamesTheBatch) {
  auto data = synthetic::generate_treebank(20, 22);
  auto vocab = build_vocabulary(data, 1);
  auto m = small_model(vocab);
  for (auto& p : m.params()) p = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(m, vocab, data, {}, cfg);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos) << e.what();
  }
}

TEST(Train, OverfitsTenSentences) {
  auto data = synthetic::generate_treebank(10, 23);
  auto vocab = build_vocabulary(data, 1);
  auto m = small_model(vocab, 3, 64);
  // Ten sentences give about seven updates per epoch, too few for the default
  // schedule to settle before the decay starts.
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr0 = 0.5;
  cfg.decay_after = 20;
  cfg.dropout = false;
  auto result = train(m, vocab, data, data, cfg);
  ASSERT_EQ(result.epochs.size(), 30u);
  auto r = attachment_scores(greedy_trees(m, vocab, data), data, vocab.labels());
  EXPECT_EQ(r.uas, 100.0);
  EXPECT_LT(result.epochs.back().loss, result.epochs.front().loss);
}

TEST(Train, SameSeedSameCheckpoints) {
  auto data = synthetic::generate_treebank(60, 24);
  auto dev = synthetic::generate_treebank(10, 25);
  auto vocab = build_vocabulary(data, 1);
  testing_support::ScratchDir d1("train_a"), d2("train_b");
  TrainConfig cfg;
  cfg.epochs = 3;
  auto m1 = small_model(vocab), m2 = small_model(vocab);
  cfg.out_dir = d1.path().string();
  auto r1 = train(m1, vocab, data, dev, cfg);
  cfg.out_dir = d2.path().string();
  auto r2 = train(m2, vocab, data, dev, cfg);
  EXPECT_EQ(parameter_hash(m1), parameter_hash(m2));
  ASSERT_EQ(r1.checkpoints.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(std::filesystem::path(r1.checkpoints[i]).filename(), checkpoint_name(static_cast<int>(i) + 1));
    EXPECT_EQ(parameter_hash(load_checkpoint(r1.checkpoints[i]).model),
              parameter_hash(load_checkpoint(r2.checkpoints[i]).model));
  }
  EXPECT_EQ(slurp(d1.file("train_log.csv")), slurp(d2.file("train_log.csv")));
  std::ifstream log(d1.file("train_log.csv"));
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "epoch,loss,dev_las,dev_uas,label_acc,lr");

  cfg.seed = 99;
  cfg.out_dir.clear();
  auto m3 = small_model(vocab);
  train(m3, vocab, data, dev, cfg);
  EXPECT_NE(parameter_hash(m1), parameter_hash(m3));
}

TEST(Train, CallbackStopsEarly) {
  auto data = synthetic::generate_treebank(20, 26);
  auto vocab = build_vocabulary(data, 1);
  auto m = small_model(vocab);
  TrainConfig cfg;
  cfg.epochs = 10;
  auto r = train(m, vocab, data, {}, cfg, [](const EpochRecord& rec, const Model&) { return rec.epoch < 2; });
  EXPECT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.epochs[1].lr, 1.0);
}

TEST(Select, DevAccuracyPicksBestEarliestOnTies) {
  auto data = synthetic::generate_treebank(5, 27);
  auto vocab = build_vocabulary(data, 1);
  auto m = small_model(vocab);
  testing_support::ScratchDir dir("select");
  std::vector<std::string> paths;
  const std::vector<double> monotone{40, 50, 55, 61};
  for (std::size_t i = 0; i < monotone.size(); ++i) {
    paths.push_back(dir.file(checkpoint_name(static_cast<int>(i) + 1)));
    save_checkpoint(paths.back(), m, vocab, {{"epoch", i + 1}, {"dev_las", monotone[i]}});
  }
  auto sel = select_checkpoint(paths, SelectCriterion::dev_accuracy);
  EXPECT_EQ(sel.scores[sel.chosen].epoch, 4);

  save_checkpoint(paths[1], m, vocab, {{"epoch", 2}, {"dev_las", 61.0}});
  EXPECT_EQ(select_by_dev_accuracy(paths).chosen, 1u);
  EXPECT_THROW(select_by_dev_accuracy({}), ValidationError);
  EXPECT_THROW(select_checkpoint(paths, SelectCriterion::r2_fit), ConfigError);
}

// BOLD data planted from one epoch's surprisal is fit best by that epoch.
TEST(Select, R2FitRecoversPlantedEpoch) {
  auto train_set = synthetic::generate_treebank(200, 31);
  auto vocab = build_vocabulary(train_set, 2);
  auto m = small_model(vocab, 5);
  testing_support::ScratchDir dir("r2fit");
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.out_dir = dir.path().string();
  auto result = train(m, vocab, train_set, {}, cfg);
  ASSERT_EQ(result.checkpoints.size(), 5u);

  auto story = synthetic::generate_story(30, 32);
  R2FitData data;
  data.sentences = story.sentences;
  data.alignment = story.alignment;
  data.search.cap = 100;
  const double tr = 2.0;
  const auto T = scans_for(story.alignment, tr) + 10;
  ControlInputs ci;
  ci.alignment = story.alignment;
  data.controls = control_design(ci, data.hrf, tr, T);

  auto planted_ck = load_checkpoint(result.checkpoints[2]);
  auto series = profile_text(planted_ck.model, planted_ck.vocab, data.sentences, {data.k}, data.search);
  auto effect = convolve_and_sample(regressor_events(emit_regressor(series, data.alignment, data.k)), data.hrf, tr, T);
  synthetic::PlantConfig pc;
  pc.subjects = 3;
  pc.nx = pc.ny = pc.nz = 4;
  pc.region_size = 12;
  pc.sections = 4;
  pc.snr = 1000.0;  // near noise-free: only the generating epoch fits exactly
  auto planted = synthetic::plant_experiment(data.controls, effect, pc);
  data.subjects = planted.subjects;
  data.region = planted.region;

  auto sel = select_checkpoint(result.checkpoints, SelectCriterion::r2_fit, &data);
  ASSERT_EQ(sel.scores.size(), 5u);
  EXPECT_EQ(sel.scores[sel.chosen].epoch, 3);
  for (const auto& s : sel.scores) ASSERT_TRUE(s.r2_increase.has_value());

  // Accuracy-based selection runs on the same checkpoints and returns a valid epoch.
  auto by_dev = select_checkpoint(result.checkpoints, SelectCriterion::dev_accuracy);
  EXPECT_GE(by_dev.scores[by_dev.chosen].epoch, 1);
  EXPECT_LE(by_dev.scores[by_dev.chosen].epoch, 5);
}
