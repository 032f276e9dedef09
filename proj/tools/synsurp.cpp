// synsurp: train a generative transition parser, profile word-by-word surprisal,
// and compare surprisal regressors against BOLD panels.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration, 3 bad input data,
// 4 training diverged.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "synsurp/csv.hpp"
#include "synsurp/error.hpp"
#include "synsurp/evaluation.hpp"
#include "synsurp/neuro_regression.hpp"
#include "synsurp/path_search.hpp"
#include "synsurp/pipeline.hpp"
#include "synsurp/surprisal.hpp"
#include "synsurp/synthetic.hpp"
#include "synsurp/trainer.hpp"
#include "synsurp/treebank_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace synsurp;

namespace {

enum ExitCode { kOk = 0, kRuntime = 1, kUsage = 2, kInput = 3, kDiverged = 4 };

// ---------------------------------------------------------------------------
// Settings: defaults, then the config file, then --set and dedicated flags.

class Settings {
 public:
  Settings(std::string command, json defaults) : command_(std::move(command)), j_(std::move(defaults)) {}

  void merge(const json& obj, const std::string& source) {
    if (!obj.is_object()) throw ConfigError(source + ": expected a JSON object");
    for (const auto& [key, value] : obj.items()) set(key, value, source);
  }

  void set(const std::string& key, const json& value, const std::string& source) {
    if (!j_.contains(key)) throw ConfigError(source + ": '" + command_ + "' has no setting '" + key + "'");
    j_[key] = value;
  }

  bool has(const std::string& key) const { return !j_.at(key).is_null(); }

  template <class T>
  T get(const std::string& key) const {
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("setting '" + key + "' has the wrong type (got " + j_.at(key).dump() + ")");
    }
  }

  std::string str(const std::string& key) const { return get<std::string>(key); }

  std::string required(const std::string& key) const {
    if (!has(key)) throw ConfigError("setting '" + key + "' is required for '" + command_ + "'");
    return str(key);
  }

  /// An existing file (or directory when `dir`).
  std::string existing(const std::string& key, bool dir = false) const {
    const auto p = required(key);
    check_exists(key, p, dir);
    return p;
  }

  std::optional<std::string> optional_file(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    const auto p = str(key);
    check_exists(key, p, false);
    return p;
  }

  /// A string or an array of strings, each an existing file. A directory expands to
  /// its files with the given extension, sorted by name.
  std::vector<std::string> files(const std::string& key, const std::string& ext = {}) const {
    if (!has(key)) throw ConfigError("setting '" + key + "' is required for '" + command_ + "'");
    std::vector<std::string> raw;
    if (j_.at(key).is_array())
      raw = get<std::vector<std::string>>(key);
    else
      raw.push_back(str(key));
    std::vector<std::string> out;
    for (const auto& p : raw) {
      if (!ext.empty() && fs::is_directory(p)) {
        std::vector<std::string> found;
        for (const auto& e : fs::directory_iterator(p))
          if (e.is_regular_file() && e.path().extension() == ext) found.push_back(e.path().string());
        std::sort(found.begin(), found.end());
        if (found.empty()) throw ValidationError(key + ": no " + ext + " files in " + p);
        out.insert(out.end(), found.begin(), found.end());
      } else {
        check_exists(key, p, false);
        out.push_back(p);
      }
    }
    if (out.empty()) throw ConfigError("setting '" + key + "' lists no files");
    return out;
  }

  std::size_t positive(const std::string& key) const {
    const auto v = get<long long>(key);
    if (v <= 0) throw ConfigError("setting '" + key + "' must be positive");
    return static_cast<std::size_t>(v);
  }

  std::size_t count(const std::string& key) const {
    const auto v = get<long long>(key);
    if (v < 0) throw ConfigError("setting '" + key + "' must not be negative");
    return static_cast<std::size_t>(v);
  }

  /// Pool cap: a positive integer or "unlimited".
  std::size_t cap() const {
    if (j_.at("cap").is_string()) {
      if (str("cap") == "unlimited") return SearchOptions::unlimited;
      throw ConfigError("setting 'cap' must be a positive integer or \"unlimited\"");
    }
    return positive("cap");
  }

  std::vector<std::size_t> k_list() const {
    auto ks = get<std::vector<long long>>("k_list");
    if (ks.empty()) throw ConfigError("k_list is empty");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (ks[i] <= 0) throw ConfigError("k_list entries must be positive");
      if (i > 0 && ks[i] <= ks[i - 1]) throw ConfigError("k_list must be sorted ascending without repeats");
      out.push_back(static_cast<std::size_t>(ks[i]));
    }
    return out;
  }

  RankKey rank() const {
    const auto r = str("rank");
    if (r == "syntactic") return RankKey::syntactic;
    if (r == "full") return RankKey::full;
    throw ConfigError("rank must be \"syntactic\" or \"full\"");
  }

  ConllFormat format() const {
    const auto f = str("format");
    if (f == "conllu") return ConllFormat::conllu;
    if (f == "conllx") return ConllFormat::conllx;
    throw ConfigError("format must be \"conllu\" or \"conllx\"");
  }

  const json& raw() const noexcept { return j_; }

 private:
  static void check_exists(const std::string& key, const std::string& p, bool dir) {
    if (dir ? !fs::is_directory(p) : !fs::is_regular_file(p))
      throw ValidationError(key + ": no such " + std::string(dir ? "directory" : "file") + " '" + p + "'");
  }

  std::string command_;
  json j_;
};

/// Flags shared by the subcommands. Only one subcommand runs per invocation.
struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::string seed, cap, k_list, out;
  bool plot = false;
  bool verbose = false;
};

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;  // bare strings need no quotes
  }
}

Settings load_settings(const std::string& command, json defaults, const Flags& f) {
  Settings s(command, std::move(defaults));
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw ConfigError("cannot open config file " + f.config);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(f.config + ": " + e.what());
    }
    // A file may hold one section per subcommand.
    if (j.is_object() && j.contains(command) && j[command].is_object()) j = j[command];
    s.merge(j, f.config);
  }
  for (const auto& kv : f.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    s.set(kv.substr(0, eq), parse_value(kv.substr(eq + 1)), "--set");
  }
  if (!f.seed.empty()) s.set("seed", parse_value(f.seed), "--seed");
  if (!f.cap.empty()) s.set("cap", parse_value(f.cap), "--cap");
  if (!f.out.empty()) s.set("out", f.out, "--out");
  if (!f.k_list.empty()) {
    json ks = json::array();
    for (const auto& part : csv::split(f.k_list)) ks.push_back(parse_value(part));
    s.set("k_list", ks, "--k-list");
  }
  if (f.plot) s.set("emit_plot_data", true, "--emit-plot-data");
  if (f.verbose) s.set("per_sentence", true, "--verbose");
  return s;
}

// ---------------------------------------------------------------------------
// Small IO helpers

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

/// One sentence per line, whitespace-separated tokens; or the FORM column of a CoNLL file.
std::vector<std::vector<std::string>> read_text(const std::string& path, const std::string& fmt) {
  const auto ext = fs::path(path).extension().string();
  const bool conll = fmt == "conll" || (fmt == "auto" && (ext == ".conllu" || ext == ".conll" || ext == ".conllx"));
  std::vector<std::vector<std::string>> out;
  if (conll) {
    for (auto& s : read_conll(path)) out.push_back(std::move(s.tokens));
    return out;
  }
  if (fmt != "auto" && fmt != "lines") throw ConfigError("text_format must be \"auto\", \"lines\" or \"conll\"");
  std::ifstream in(path);
  if (!in) throw LookupError("cannot open " + path);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<std::string> toks;
    for (std::string t; ss >> t;) toks.push_back(t);
    if (!toks.empty()) out.push_back(std::move(toks));
  }
  return out;
}

ControlInputs read_controls(const Settings& s) {
  ControlInputs ci;
  ci.alignment = read_alignment(s.existing("alignment"));
  if (auto p = s.optional_file("frequency")) ci.frequency = read_frequency_table(*p);
  if (auto p = s.optional_file("f0")) ci.f0 = read_feature_series(*p);
  if (auto p = s.optional_file("rms")) ci.rms = read_feature_series(*p);
  return ci;
}

std::vector<BoldPanel> read_panels(const std::vector<std::string>& paths) {
  std::vector<BoldPanel> out;
  for (const auto& p : paths) {
    out.push_back(read_bold(p));
    if (out.back().tr != out.front().tr)
      throw ValidationError(p + ": TR " + csv::format(out.back().tr) + " differs from " + csv::format(out.front().tr));
  }
  return out;
}

std::vector<std::size_t> read_region(const std::string& path, std::size_t voxels) {
  auto table = csv::read(path, {"voxel"});
  std::vector<std::size_t> region;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const double v = csv::to_double(table.rows[r][0], table.lines[r]);
    if (v < 0 || v >= static_cast<double>(voxels) || v != std::floor(v))
      throw ValidationError(path + ": voxel index out of range at line " + std::to_string(table.lines[r]));
    region.push_back(static_cast<std::size_t>(v));
  }
  return region;
}

std::uint64_t parse_hash(const json& v) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    try {
      std::size_t used = 0;
      const bool hex = s.rfind("0x", 0) == 0;
      auto h = std::stoull(hex ? s.substr(2) : s, &used, hex ? 16 : 10);
      if (used == (hex ? s.size() - 2 : s.size())) return h;
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("vocab_hash must be an unsigned integer or a decimal/0x string");
}

const ExternalEncodings* load_encodings(const Settings& s, std::optional<ExternalEncodings>& holder,
                                        const Model& m) {
  if (m.dims().mode != EncoderMode::external) return nullptr;
  holder = ExternalEncodings::load(s.existing("encodings"));
  return &*holder;
}

bool trained_with_labels(const Checkpoint& ck) {
  if (ck.meta.contains("train") && ck.meta["train"].contains("use_labels")) return ck.meta["train"]["use_labels"].get<bool>();
  return true;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const Flags& f) {
  auto s = load_settings("train", {{"train", nullptr},        {"dev", nullptr},           {"format", "conllu"},
                                   {"synthetic", 0},          {"synthetic_dev", 0},       {"synthetic_seed", 1},
                                   {"lexicon_seed", 2090},    {"encoder", "internal"},    {"input", "generative"},
                                   {"train_encodings", nullptr}, {"dev_encodings", nullptr}, {"min_count", 2},
                                   {"embed_dim", 64},         {"hidden_dim", 256},        {"init_range", 0.1},
                                   {"batch_size", 16},        {"epochs", 30},             {"lr0", 1.0},
                                   {"decay", 1.7},            {"decay_after", 6},         {"grad_clip_norm", 5.0},
                                   {"seed", 1},               {"dropout", true},          {"use_labels", true},
                                   {"exclude_punct", false},  {"early_stop_uas", nullptr}, {"out", nullptr}},
                         f);
  TrainConfig cfg;
  cfg.batch_size = s.positive("batch_size");
  cfg.epochs = static_cast<int>(s.positive("epochs"));
  cfg.lr0 = s.get<double>("lr0");
  cfg.decay = s.get<double>("decay");
  cfg.decay_after = static_cast<int>(s.count("decay_after"));
  cfg.grad_clip_norm = s.get<double>("grad_clip_norm");
  cfg.seed = s.get<std::uint64_t>("seed");
  cfg.dropout = s.get<bool>("dropout");
  cfg.use_labels = s.get<bool>("use_labels");
  cfg.exclude_punct = s.get<bool>("exclude_punct");
  cfg.out_dir = s.required("out");
  cfg.validate();

  const auto enc = s.str("encoder"), input = s.str("input");
  if (enc != "internal" && enc != "external") throw ConfigError("encoder must be \"internal\" or \"external\"");
  if (input != "generative" && input != "full_input") throw ConfigError("input must be \"generative\" or \"full_input\"");
  const bool external = enc == "external";
  const auto synth = s.count("synthetic");
  if (synth > 0 && s.has("train")) throw ConfigError("give either 'train' or 'synthetic', not both");
  if (synth == 0 && !s.has("train")) throw ConfigError("'train' (treebank paths) or 'synthetic' (a sentence count) is required");
  if (external && synth > 0) throw ConfigError("external encodings need a real treebank");
  const auto min_count = static_cast<int>(s.positive("min_count"));
  const auto embed = s.positive("embed_dim");
  auto hidden = s.positive("hidden_dim");
  const double init_range = s.get<double>("init_range");
  if (!(init_range >= 0)) throw ConfigError("init_range must not be negative");
  std::optional<double> stop_uas;
  if (s.has("early_stop_uas")) stop_uas = s.get<double>("early_stop_uas");

  // Every path is checked before anything is read.
  std::vector<std::string> train_paths, dev_paths;
  if (synth == 0) train_paths = s.files("train");
  if (s.has("dev")) dev_paths = s.files("dev");
  std::optional<std::string> train_enc_path, dev_enc_path;
  if (external) {
    train_enc_path = s.existing("train_encodings");
    dev_enc_path = s.optional_file("dev_encodings");
    if (!dev_paths.empty() && !dev_enc_path) throw ConfigError("'dev_encodings' is required with an external encoder");
  }

  std::vector<Sentence> train_set, dev_set;
  if (synth > 0) {
    train_set = synthetic::generate_treebank(synth, s.get<std::uint64_t>("synthetic_seed"), s.get<std::uint64_t>("lexicon_seed"));
    if (auto nd = s.count("synthetic_dev"); nd > 0)
      dev_set = synthetic::generate_treebank(nd, s.get<std::uint64_t>("synthetic_seed") + 1, s.get<std::uint64_t>("lexicon_seed"));
  }
  for (const auto& p : train_paths) {
    auto part = read_conll(p, s.format());
    train_set.insert(train_set.end(), part.begin(), part.end());
  }
  for (const auto& p : dev_paths) {
    auto part = read_conll(p, s.format());
    dev_set.insert(dev_set.end(), part.begin(), part.end());
  }
  std::optional<ExternalEncodings> train_ext, dev_ext;
  if (external) {
    // Encodings are indexed by sentence position, so nothing may be dropped.
    train_ext = ExternalEncodings::load(*train_enc_path);
    if (dev_enc_path) dev_ext = ExternalEncodings::load(*dev_enc_path);
    for (const auto& snt : train_set)
      if (!is_projective(snt)) throw ValidationError("external-encoder training needs a projective treebank");
    hidden = train_ext->dimension();
  } else {
    std::size_t dropped = 0, dropped_dev = 0;
    train_set = filter_projective(train_set, &dropped);
    dev_set = filter_projective(dev_set, &dropped_dev);
    if (dropped + dropped_dev)
      std::cerr << "skipped " << dropped << " training and " << dropped_dev << " dev sentences without a projective tree\n";
  }
  if (train_set.empty()) throw ValidationError("training set is empty");

  auto vocab = build_vocabulary(train_set, min_count);
  std::optional<Vocabulary> encoder_vocab;
  const auto imode = input == "generative" ? InputMode::generative : InputMode::full_input;
  if (!external && imode == InputMode::full_input) encoder_vocab = build_vocabulary(train_set, 1);
  Model m(make_dims(vocab, external ? EncoderMode::external : EncoderMode::internal, imode,
                    encoder_vocab ? &*encoder_vocab : nullptr, embed, hidden),
          cfg.seed, init_range);
  if (encoder_vocab) m.set_encoder_vocab(*encoder_vocab);

  fs::create_directories(cfg.out_dir);
  json vj = vocab.to_json();
  vj["hash"] = vocab.hash();
  write_json(fs::path(cfg.out_dir) / "vocab.json", vj);
  std::cout << "training on " << train_set.size() << " sentences (" << vocab.size() << " word classes, "
            << vocab.labels().size() << " labels), dev " << dev_set.size() << "\n";

  auto on_epoch = [&](const EpochRecord& r, const Model&) {
    std::cout << "epoch " << r.epoch << " loss " << csv::format(r.loss) << " lr " << csv::format(r.lr);
    if (!dev_set.empty()) std::cout << " dev_uas " << csv::format(r.dev.uas) << " dev_las " << csv::format(r.dev.las);
    std::cout << std::endl;
    return !(stop_uas && !dev_set.empty() && r.dev.uas >= *stop_uas);
  };
  auto result = train(m, vocab, train_set, dev_set, cfg, on_epoch, train_ext ? &*train_ext : nullptr,
                      dev_ext ? &*dev_ext : nullptr);
  std::cout << "wrote " << result.checkpoints.size() << " checkpoints and train_log.csv to " << cfg.out_dir << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(const Flags& f) {
  auto s = load_settings("eval", {{"checkpoint", nullptr}, {"test", nullptr},   {"format", "conllu"},
                                  {"exclude_punct", false}, {"decoder", "greedy"}, {"cap", 10000},
                                  {"encodings", nullptr},  {"per_sentence", false}, {"out", nullptr}},
                         f);
  const auto ck_path = s.existing("checkpoint");
  const auto test_paths = s.files("test");
  const auto decoder = s.str("decoder");
  if (decoder != "greedy" && decoder != "pool") throw ConfigError("decoder must be \"greedy\" or \"pool\"");
  const auto cap = s.cap();
  const bool punct = s.get<bool>("exclude_punct"), per_sentence = s.get<bool>("per_sentence");
  const auto fmt = s.format();

  auto ck = load_checkpoint(ck_path);
  std::vector<Sentence> test;
  for (const auto& p : test_paths) {
    auto part = read_conll(p, fmt);
    test.insert(test.end(), part.begin(), part.end());
  }
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!test[i].has_tree()) throw ValidationError("test sentence " + std::to_string(i + 1) + " has no gold tree");
    validate_tree(test[i]);
  }
  std::optional<ExternalEncodings> ext_holder;
  const auto* ext = load_encodings(s, ext_holder, ck.model);

  const bool labels = trained_with_labels(ck);
  std::vector<DependencyTree> pred;
  if (decoder == "greedy")
    pred = greedy_trees(ck.model, ck.vocab, test, labels, ext);
  else {
    SearchOptions opt;
    opt.cap = cap;
    opt.use_labels = labels;
    opt.labels = labels ? ck.model.dims().labels : 0;
    pred = pool_trees(ck.model, ck.vocab, test, opt, ext);
  }

  AttachmentCounts total;
  json rows = json::array();
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto c = attachment_counts(pred[i], test[i], ck.vocab.labels(), punct);
    total += c;
    if (per_sentence) {
      auto j = to_json(make_report(c, punct));
      j["sentence"] = i + 1;
      rows.push_back(j);
    }
  }
  json report = {{"checkpoint", ck_path},
                 {"epoch", ck.meta.value("epoch", 0)},
                 {"decoder", decoder},
                 {"sentences", test.size()},
                 {"scores", to_json(make_report(total, punct))}};
  if (per_sentence) report["per_sentence"] = rows;
  if (s.has("out")) {
    const fs::path out = s.str("out");
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_json(out, report);
  }
  std::cout << report.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// profile

void write_combined_csv(const fs::path& path, const SurprisalSeries& series) {
  auto out = open_out(path);
  out << "word_index,sentence,word";
  for (auto k : series.k_list) out << ",syn_k" << k;
  for (auto k : series.k_list) out << ",full_k" << k << ",lex_k" << k;
  out << '\n';
  for (const auto& w : series.words) {
    out << w.word_index << ',' << w.sentence << ',' << csv::quote(w.word);
    for (double v : w.syn) out << ',' << csv::format(v);
    for (std::size_t kk = 0; kk < series.k_list.size(); ++kk) out << ',' << csv::format(w.full[kk]) << ',' << csv::format(w.lex[kk]);
    out << '\n';
  }
}

/// Long format for plotting: one row per (token, k).
void write_plot_data(const fs::path& path, const SurprisalSeries& series) {
  auto out = open_out(path);
  out << "word_index,sentence,position,word,k,syn\n";
  std::size_t pos = 0, last_sentence = 0;
  for (const auto& w : series.words) {
    pos = (pos == 0 || w.sentence != last_sentence) ? 1 : pos + 1;
    last_sentence = w.sentence;
    for (std::size_t kk = 0; kk < series.k_list.size(); ++kk)
      out << w.word_index << ',' << w.sentence << ',' << pos << ',' << csv::quote(w.word) << ',' << series.k_list[kk]
          << ',' << csv::format(w.syn[kk]) << '\n';
  }
}

int cmd_profile(const Flags& f) {
  auto s = load_settings("profile", {{"checkpoint", nullptr}, {"score_table", nullptr}, {"text", nullptr},
                                     {"text_format", "auto"}, {"k_list", {1, 5}},       {"cap", 10000},
                                     {"rank", "syntactic"},   {"use_labels", true},     {"alignment", nullptr},
                                     {"vocab", nullptr},      {"vocab_hash", nullptr},  {"encodings", nullptr},
                                     {"emit_plot_data", false}, {"out", nullptr}},
                         f);
  if (s.has("checkpoint") == s.has("score_table")) throw ConfigError("give exactly one of 'checkpoint' and 'score_table'");
  const auto text_path = s.existing("text");
  const auto fmt = s.str("text_format");
  SearchOptions opt;
  opt.cap = s.cap();
  opt.rank = s.rank();
  opt.use_labels = s.get<bool>("use_labels");
  const auto ks = s.k_list();
  const auto align_path = s.optional_file("alignment");
  const auto vocab_path = s.optional_file("vocab");
  std::optional<std::uint64_t> want_hash;
  if (s.has("vocab_hash")) want_hash = parse_hash(s.raw().at("vocab_hash"));
  const bool plot = s.get<bool>("emit_plot_data");
  const fs::path out = s.required("out");
  if (s.has("score_table") && (vocab_path || want_hash)) throw ConfigError("a vocabulary check needs a checkpoint");

  std::optional<Checkpoint> ck;
  std::optional<ScoreTable> table;
  if (s.has("checkpoint")) {
    ck = load_checkpoint(s.existing("checkpoint"));
    const auto have = ck->vocab.hash();
    if (vocab_path) {
      std::ifstream in(*vocab_path);
      const auto other = Vocabulary::from_json(json::parse(in)).hash();
      if (other != have)
        throw ConfigError("vocabulary mismatch: checkpoint hash " + std::to_string(have) + ", " + *vocab_path + " hash " +
                          std::to_string(other) + "; the checkpoint was trained with a different vocabulary");
    }
    if (want_hash && *want_hash != have)
      throw ConfigError("vocabulary mismatch: checkpoint hash " + std::to_string(have) + ", expected " +
                        std::to_string(*want_hash) + "; the checkpoint was trained with a different vocabulary");
  } else {
    table = load_score_table(s.existing("score_table"));
  }
  const auto sentences = read_text(text_path, fmt);
  std::optional<StimulusAlignment> alignment;
  if (align_path) alignment = read_alignment(*align_path);

  SurprisalSeries series;
  series.k_list = ks;
  if (ck) {
    std::optional<ExternalEncodings> ext_holder;
    const auto* ext = load_encodings(s, ext_holder, ck->model);
    if (opt.use_labels && !trained_with_labels(*ck)) opt.use_labels = false;
    series = profile_text(ck->model, ck->vocab, sentences, ks, opt, ext);
  } else {
    opt.labels = opt.use_labels ? table->labels.size() : 0;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      std::vector<int> words;
      for (const auto& t : sentences[i]) words.push_back(table->word_id(t));
      append_sentence(series, sentences[i], std::span<const int>(words), table->scorer, opt, i);
    }
  }

  fs::create_directories(out);
  for (auto k : ks) write_series_csv((out / ("series_k" + std::to_string(k) + ".csv")).string(), series, k);
  write_combined_csv(out / "surprisal.csv", series);
  if (alignment) {
    write_multi_k_csv((out / "aligned.csv").string(), series, *alignment);
    for (auto k : ks)
      write_regressor_csv((out / ("regressor_k" + std::to_string(k) + ".csv")).string(), emit_regressor(series, *alignment, k));
  }
  if (plot) write_plot_data(out / "plot_data.csv", series);
  if (series.cap_bound) std::cerr << "warning: the pool cap discarded paths; raise 'cap' for exact values\n";
  std::cout << "profiled " << series.words.size() << " words in " << sentences.size() << " sentences into "
            << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// regress

int cmd_regress(const Flags& f) {
  auto s = load_settings("regress", {{"alignment", nullptr},   {"frequency", nullptr},  {"f0", nullptr},
                                     {"rms", nullptr},         {"regressor_a", nullptr}, {"regressor_b", nullptr},
                                     {"name_a", "syn_k1"},     {"name_b", "syn_k5"},     {"bold", nullptr},
                                     {"p_threshold", 0.001},   {"min_cluster", 15},      {"out", nullptr}},
                         f);
  const auto ra = s.existing("regressor_a"), rb = s.existing("regressor_b");
  const auto name_a = s.str("name_a"), name_b = s.str("name_b");
  if (name_a == name_b) throw ConfigError("name_a and name_b must differ");
  const auto bold_paths = s.files("bold", ".bold");
  const double p = s.get<double>("p_threshold");
  if (!(p > 0 && p < 1)) throw ConfigError("p_threshold must lie in (0, 1)");
  const auto min_size = s.positive("min_cluster");
  const fs::path out = s.required("out");
  auto ci = read_controls(s);
  const auto rows_a = read_regressor_csv(ra), rows_b = read_regressor_csv(rb);
  const auto subjects = read_panels(bold_paths);

  const HrfSpec hrf;
  const double tr = subjects[0].tr;
  const auto T = subjects[0].scans();
  const auto controls = control_design(ci, hrf, tr, T);
  const auto col_a = convolve_and_sample(regressor_events(rows_a), hrf, tr, T);
  const auto col_b = convolve_and_sample(regressor_events(rows_b), hrf, tr, T);
  auto cmp = compare_regressors(controls, name_a, col_a, name_b, col_b, subjects, p, min_size);

  fs::create_directories(out);
  const auto& grid = subjects[0].grid;
  json mean_a = json::array(), mean_b = json::array();
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    char tag[32];
    std::snprintf(tag, sizeof tag, "subject_%02zu_", i + 1);
    write_map((out / (tag + name_a + "_increase.map")).string(), grid, cmp.inc_a[i]);
    write_map((out / (tag + name_b + "_increase.map")).string(), grid, cmp.inc_b[i]);
    mean_a.push_back(cmp.inc_a[i].mean());
    mean_b.push_back(cmp.inc_b[i].mean());
  }
  write_map((out / "tmap.map").string(), grid, cmp.tmap.t);
  write_map((out / "zmap.map").string(), grid, cmp.tmap.z);
  write_cluster_csv((out / "clusters.csv").string(), cmp.clusters);

  json clusters = json::array();
  std::size_t toward_b = 0;
  for (const auto& c : cmp.clusters.clusters) {
    toward_b += c.peak_stat > 0;
    clusters.push_back({{"peak_mm", {c.peak_mm[0], c.peak_mm[1], c.peak_mm[2]}},
                        {"peak_stat", c.peak_stat},
                        {"voxels", c.voxel_count},
                        {"size_mm3", c.size_mm3},
                        {"greater", c.peak_stat > 0 ? name_b : name_a}});
  }
  json summary = {{"subjects", subjects.size()},
                  {"voxels", grid.size()},
                  {"scans", T},
                  {"contrast", name_b + " - " + name_a},
                  {"df", cmp.tmap.df},
                  {"masked_voxels", cmp.tmap.masked},
                  {"z_threshold", cmp.clusters.z_threshold},
                  {"mean_increase", {{name_a, mean_a}, {name_b, mean_b}}},
                  {"clusters", clusters}};
  write_json(out / "summary.json", summary);
  std::cout << cmp.clusters.clusters.size() << " clusters (" << toward_b << " with greater increase for " << name_b
            << ", " << cmp.clusters.clusters.size() - toward_b << " for " << name_a << "); outputs in " << out.string()
            << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// select

int cmd_select(const Flags& f) {
  auto s = load_settings("select", {{"checkpoints", nullptr}, {"criterion", "dev_accuracy"}, {"text", nullptr},
                                    {"text_format", "auto"},  {"alignment", nullptr},       {"frequency", nullptr},
                                    {"f0", nullptr},          {"rms", nullptr},             {"bold", nullptr},
                                    {"region", nullptr},      {"k", 5},                     {"cap", 10000},
                                    {"use_labels", true},     {"out", nullptr}},
                         f);
  const auto paths = s.files("checkpoints", ".ckpt");
  const auto criterion = s.str("criterion");
  if (criterion != "dev_accuracy" && criterion != "r2_fit" && criterion != "both")
    throw ConfigError("criterion must be \"dev_accuracy\", \"r2_fit\" or \"both\"");
  const bool fit = criterion != "dev_accuracy";

  Selection sel;
  std::size_t by_dev = 0;
  if (fit) {
    R2FitData data;
    const auto text_path = s.existing("text");
    const auto bold_paths = s.files("bold", ".bold");
    const auto region_path = s.optional_file("region");
    data.k = s.positive("k");
    data.search.cap = s.cap();
    data.search.use_labels = s.get<bool>("use_labels");
    auto ci = read_controls(s);
    data.sentences = read_text(text_path, s.str("text_format"));
    data.alignment = ci.alignment;
    data.subjects = read_panels(bold_paths);
    if (region_path) data.region = read_region(*region_path, data.subjects[0].grid.size());
    data.controls = control_design(ci, data.hrf, data.subjects[0].tr, data.subjects[0].scans());
    sel = select_by_r2_fit(paths, data);
    by_dev = argmax_index(sel.scores, [](const CheckpointScore& c) { return c.dev_las; });
  } else {
    sel = select_by_dev_accuracy(paths);
    by_dev = sel.chosen;
  }

  std::ostringstream rep;
  rep << "epoch,dev_las,dev_uas,r2_increase\n";
  json rows = json::array();
  for (const auto& c : sel.scores) {
    rep << c.epoch << ',' << csv::format(c.dev_las) << ',' << csv::format(c.dev_uas) << ','
        << (c.r2_increase ? csv::format(*c.r2_increase) : std::string("NA")) << '\n';
    json r = {{"path", c.path}, {"epoch", c.epoch}, {"dev_las", c.dev_las}, {"dev_uas", c.dev_uas}};
    if (c.r2_increase) r["r2_increase"] = *c.r2_increase;
    rows.push_back(r);
  }
  json report = {{"criterion", criterion}, {"scores", rows}, {"dev_accuracy_choice", sel.scores[by_dev].epoch}};
  rep << "dev_accuracy choice: epoch " << sel.scores[by_dev].epoch << '\n';
  if (fit) {
    rep << "r2_fit choice: epoch " << sel.scores[sel.chosen].epoch << '\n';
    report["r2_fit_choice"] = sel.scores[sel.chosen].epoch;
    if (by_dev != sel.chosen)
      rep << "note: the criteria disagree; the epoch with the best dev accuracy is not the one that best fits the "
             "BOLD data\n";
  }
  const auto& chosen = sel.scores[criterion == "dev_accuracy" ? by_dev : sel.chosen];
  report["chosen"] = {{"epoch", chosen.epoch}, {"path", chosen.path}};
  rep << "chosen: " << chosen.path << '\n';
  if (s.has("out")) {
    const fs::path out = s.str("out");
    fs::create_directories(out);
    open_out(out / "selection.txt") << rep.str();
    write_json(out / "selection.json", report);
  }
  std::cout << rep.str();
  return kOk;
}

// ---------------------------------------------------------------------------
// synth

void write_feature(const fs::path& path, const FeatureSeries& fsr) {
  auto out = open_out(path);
  out << "time,value\n";
  for (std::size_t i = 0; i < fsr.values.size(); ++i)
    out << csv::format(fsr.start_time + static_cast<double>(i) * fsr.sample_period) << ',' << csv::format(fsr.values[i])
        << '\n';
  write_json(path.string() + ".json", {{"sample_period", fsr.sample_period}});
}

int cmd_synth(const Flags& f) {
  auto s = load_settings("synth", {{"what", {"treebank", "story"}},
                                   {"train_sentences", 500},
                                   {"dev_sentences", 100},
                                   {"test_sentences", 0},
                                   {"story_sentences", 40},
                                   {"seed", 1},
                                   {"lexicon_seed", 2090},
                                   {"plant_regressor", nullptr},
                                   {"alignment", nullptr},
                                   {"frequency", nullptr},
                                   {"f0", nullptr},
                                   {"rms", nullptr},
                                   {"subjects", 12},
                                   {"grid", {10, 10, 10}},
                                   {"voxel_mm", 2.0},
                                   {"sections", 9},
                                   {"tr", 2.0},
                                   {"snr", 0.5},
                                   {"region_size", 30},
                                   {"noise_sd", 1.0},
                                   {"control_snr", 0.5},
                                   {"extra_scans", 10},
                                   {"out", nullptr}},
                         f);
  const auto what = s.get<std::vector<std::string>>("what");
  bool tb = false, story = false, bold = false;
  for (const auto& w : what) {
    if (w == "treebank") tb = true;
    else if (w == "story") story = true;
    else if (w == "bold") bold = true;
    else throw ConfigError("'what' entries must be \"treebank\", \"story\" or \"bold\"");
  }
  const auto seed = s.get<std::uint64_t>("seed"), lex = s.get<std::uint64_t>("lexicon_seed");
  const fs::path out = s.required("out");

  synthetic::PlantConfig pc;
  std::vector<RegressorRow> effect_rows;
  ControlInputs ci;
  std::size_t extra = 0;
  if (bold) {
    const auto grid = s.get<std::vector<long long>>("grid");
    if (grid.size() != 3 || std::any_of(grid.begin(), grid.end(), [](long long g) { return g <= 0; }))
      throw ConfigError("grid must be three positive sizes");
    pc.nx = static_cast<std::uint32_t>(grid[0]);
    pc.ny = static_cast<std::uint32_t>(grid[1]);
    pc.nz = static_cast<std::uint32_t>(grid[2]);
    pc.subjects = s.positive("subjects");
    pc.voxel_mm = s.get<double>("voxel_mm");
    pc.sections = s.positive("sections");
    pc.tr = s.get<double>("tr");
    pc.snr = s.get<double>("snr");
    pc.region_size = s.positive("region_size");
    pc.noise_sd = s.get<double>("noise_sd");
    pc.control_snr = s.get<double>("control_snr");
    pc.seed = seed;
    extra = s.count("extra_scans");
    if (!(pc.voxel_mm > 0 && pc.tr > 0 && pc.snr >= 0 && pc.noise_sd > 0 && pc.control_snr >= 0))
      throw ConfigError("voxel_mm, tr and noise_sd must be positive; snr and control_snr non-negative");
    if (pc.region_size > std::size_t{pc.nx} * pc.ny * pc.nz) throw ConfigError("region_size exceeds the grid");
    const auto reg = s.existing("plant_regressor");
    ci = read_controls(s);
    effect_rows = read_regressor_csv(reg);
  }

  fs::create_directories(out);
  if (tb) {
    write_conll((out / "train.conllu").string(), synthetic::generate_treebank(s.count("train_sentences"), seed, lex));
    if (auto n = s.count("dev_sentences"))
      write_conll((out / "dev.conllu").string(), synthetic::generate_treebank(n, seed + 1, lex));
    if (auto n = s.count("test_sentences"))
      write_conll((out / "test.conllu").string(), synthetic::generate_treebank(n, seed + 2, lex));
  }
  if (story) {
    auto st = synthetic::generate_story(s.positive("story_sentences"), seed + 3, lex);
    {
      auto txt = open_out(out / "story.txt");
      for (const auto& snt : st.sentences) {
        for (std::size_t i = 0; i < snt.size(); ++i) txt << (i ? " " : "") << snt[i];
        txt << '\n';
      }
    }
    {
      auto a = open_out(out / "alignment.csv");
      a << "word,onset,offset\n";
      for (const auto& e : st.alignment.entries)
        a << csv::quote(e.word) << ',' << csv::format(e.onset) << ',' << csv::format(e.offset) << '\n';
    }
    {
      std::map<std::string, double> sorted(st.frequency.begin(), st.frequency.end());
      auto fr = open_out(out / "frequency.csv");
      fr << "word,per_million\n";
      for (const auto& [w, v] : sorted) fr << csv::quote(w) << ',' << csv::format(v) << '\n';
    }
    write_feature(out / "f0.csv", st.f0);
    write_feature(out / "rms.csv", st.rms);
  }
  if (bold) {
    const HrfSpec hrf;
    const auto T = scans_for(ci.alignment, pc.tr) + extra;
    if (T < 2 * pc.sections) throw ValidationError("the alignment spans too few scans for " + std::to_string(pc.sections) + " sections");
    const auto controls = control_design(ci, hrf, pc.tr, T);
    const auto effect = convolve_and_sample(regressor_events(effect_rows), hrf, pc.tr, T);
    const auto planted = synthetic::plant_experiment(controls, effect, pc);
    for (std::size_t i = 0; i < planted.subjects.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "subject_%02zu.bold", i + 1);
      write_bold((out / name).string(), planted.subjects[i]);
    }
    auto r = open_out(out / "region.csv");
    r << "voxel\n";
    for (auto v : planted.region) r << v << '\n';
  }
  std::cout << "wrote fixtures to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative transition parsing, word-by-word surprisal and BOLD regression"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  Flags flags;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Flags&);
    bool seed, cap, k_list, plot, verbose;
  };
  const Command commands[] = {
      {"train", "Train a parser and write one checkpoint per epoch", cmd_train, true, false, false, false, false},
      {"eval", "Score a checkpoint on a treebank (LAS, UAS, label accuracy)", cmd_eval, false, true, false, false, true},
      {"profile", "Word-by-word surprisal for each k", cmd_profile, false, true, true, true, false},
      {"regress", "Compare two surprisal regressors on BOLD panels", cmd_regress, false, false, false, false, false},
      {"select", "Choose a checkpoint by dev accuracy or fit to BOLD data", cmd_select, false, true, false, false, false},
      {"synth", "Write synthetic treebanks, stimulus files and planted BOLD panels", cmd_synth, true, false, false, false,
       false},
  };
  std::map<CLI::App*, const Command*> dispatch;
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("-c,--config", flags.config, "JSON settings file");
    sub->add_option("--set", flags.sets, "Override one setting: key=value (value parsed as JSON when possible)");
    sub->add_option("-o,--out", flags.out, "Output path");
    if (c.seed) sub->add_option("--seed", flags.seed, "Random seed");
    if (c.cap) sub->add_option("--cap", flags.cap, "Pool cap (integer or \"unlimited\")");
    if (c.k_list) sub->add_option("--k-list", flags.k_list, "Comma-separated k values, ascending");
    if (c.plot) sub->add_flag("--emit-plot-data", flags.plot, "Also write plot_data.csv");
    if (c.verbose) sub->add_flag("-v,--verbose", flags.verbose, "Include per-sentence scores");
    dispatch[sub] = &c;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  const Command* cmd = nullptr;
  for (auto* sub : app.get_subcommands()) cmd = dispatch.at(sub);
  try {
    return cmd->run(flags);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractViolation& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const TrainingError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const ValidationError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const AlignmentError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const LookupError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const RankDeficiencyError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
