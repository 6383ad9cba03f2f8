#pragma once

// Command-line front end: train, caption, eval, gradcheck, datagen.
// Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tma/data.hpp"
#include "tma/decoding.hpp"
#include "tma/gradcheck.hpp"
#include "tma/metrics.hpp"
#include "tma/model.hpp"
#include "tma/model_io.hpp"
#include "tma/training.hpp"

namespace tma::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Comma-separated list of unsigned seeds.
inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (item.empty() || used != item.size() || item.front() == '-')
      throw UsageError("invalid seed '" + item + "' in --seed");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("--seed needs at least one value");
  return out;
}

/// Options that `--set key=value` may override.
struct TrainOptions {
  TrainingConfig training;
  ModelDims dims;
  std::size_t min_freq = 1;
  std::size_t max_frames = kMaxFrames;
};

inline void apply_setting(TrainOptions& o, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  auto as_double = [&] {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size()) throw UsageError("--set " + key + ": not a number '" + value + "'");
    return v;
  };
  auto as_size = [&] {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size() || value.front() == '-')
      throw UsageError("--set " + key + ": not a non-negative integer '" + value + "'");
    return static_cast<std::size_t>(v);
  };
  auto as_bool = [&] {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw UsageError("--set " + key + ": expected true or false");
  };
  TrainingConfig& t = o.training;
  ModelDims& d = o.dims;
  const std::map<std::string, double*> doubles{
      {"adadelta_lr", &t.adadelta_lr},   {"adadelta_rho", &t.adadelta_rho},
      {"adadelta_eps", &t.adadelta_eps}, {"adam_lr", &t.adam_lr},
      {"adam_beta1", &t.adam_beta1},     {"adam_beta2", &t.adam_beta2},
      {"adam_eps", &t.adam_eps},         {"adam_decay_per_epoch", &t.adam_decay_per_epoch},
      {"clip_norm", &t.clip_norm},       {"dropout_p", &t.dropout_p},
      {"weight_decay", &t.weight_decay}, {"noise_sigma", &t.noise_sigma}};
  const std::map<std::string, std::size_t*> sizes{
      {"batch_size", &t.batch_size},
      {"patience", &t.patience},
      {"eval_every_updates", &t.eval_every_updates},
      {"max_epochs", &t.max_epochs},
      {"max_updates", &t.max_updates},
      {"max_caption_length", &t.max_caption_length},
      {"val_beam_size", &t.val_beam_size},
      {"val_max_length", &t.val_max_length},
      {"embed", &d.embed},
      {"encoder", &d.encoder},
      {"decoder", &d.decoder},
      {"align", &d.align},
      {"output", &d.output},
      {"min_freq", &o.min_freq},
      {"max_frames", &o.max_frames}};
  if (auto it = doubles.find(key); it != doubles.end())
    *it->second = as_double();
  else if (auto jt = sizes.find(key); jt != sizes.end())
    *jt->second = as_size();
  else if (key == "tanh_on_cell_output")
    d.tanh_on_cell_output = as_bool();
  else if (key == "validation_split") {
    try {
      t.validation_split = parse_split(value);
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  } else
    throw UsageError("--set: unknown key '" + key + "'");
}

/// Output path for one seed of a multi-seed run: w.tmaw -> w.seed3.tmaw.
inline std::filesystem::path seed_path(const std::filesystem::path& out, std::uint64_t seed,
                                       bool multiple) {
  if (!multiple) return out;
  std::filesystem::path p = out;
  p.replace_filename(out.stem().string() + ".seed" + std::to_string(seed) + out.extension().string());
  return p;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline nlohmann::json caption_json(const EventCaption& c) {
  return {{"day_id", c.day_id}, {"event_id", c.event_id}, {"caption", join_tokens(c.words)},
          {"logprob", c.logprob}};
}

// ---- commands -----------------------------------------------------------

struct TrainArgs {
  std::string manifest, variant, optimizer = "adam", seeds = "1", out;
  std::vector<std::string> sets;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainOptions o;
  const Variant variant = [&] {
    try {
      return parse_variant(a.variant);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }();
  try {
    o.training.optimizer = parse_optimizer(a.optimizer);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  for (const auto& s : a.sets) apply_setting(o, s);
  try {
    o.training.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const auto seeds = parse_seed_list(a.seeds);

  const Manifest m = load_manifest(a.manifest);
  const Vocabulary vocab = build_vocab(training_captions(m), o.min_freq);
  const Corpus corpus = prepare_corpus(m, vocab, o.max_frames);
  o.dims.feature_dim = m.feature_dim;

  std::vector<double> best_scores;
  for (std::uint64_t seed : seeds) {
    o.training.seed = seed;
    const auto path = seed_path(a.out, seed, seeds.size() > 1);
    const std::filesystem::path history_path = path.string() + ".history.jsonl";
    if (history_path.has_parent_path()) std::filesystem::create_directories(history_path.parent_path());
    std::ofstream history(history_path, std::ios::trunc);
    if (!history) throw DataError("cannot write '" + history_path.string() + "'");
    const TrainResult r = train_loop(corpus, vocab, variant, o.dims, o.training, &history);
    save_model(path, r.best, vocab);
    const double best = r.history.empty() ? 0.0 : r.history.back().best_so_far;
    best_scores.push_back(best);
    out << "seed " << seed << ": " << r.updates << " updates, " << r.epochs << " epochs, stop="
        << r.stop_reason << ", best val BLEU-4 " << best << " -> " << path.string() << "\n";
  }
  if (seeds.size() > 1) out << "median best val BLEU-4 over " << seeds.size() << " seeds: " << median(best_scores) << "\n";
  return kExitOk;
}

struct CaptionArgs {
  std::string model, manifest, split, day, out;
  std::size_t beam = 10, max_length = 30, max_frames = kMaxFrames;
};

inline int cmd_caption(const CaptionArgs& a, std::ostream& out) {
  if (a.split.empty() == a.day.empty()) throw UsageError("caption: give exactly one of --split or --day");
  if (a.beam == 0) throw UsageError("caption: --beam must be >= 1");
  std::optional<Split> split;
  if (!a.split.empty()) {
    try {
      split = parse_split(a.split);
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  }
  const SavedModel sm = load_model(a.model);
  const Manifest m = load_manifest(a.manifest);
  if (m.feature_dim != sm.params.dims.feature_dim)
    throw ConfigError("model feature_dim " + std::to_string(sm.params.dims.feature_dim) +
                      " does not match manifest " + std::to_string(m.feature_dim));
  const Corpus corpus = prepare_corpus(m, sm.vocab, a.max_frames);
  const DecodeConfig dc{a.beam, a.max_length, false};

  std::ofstream file;
  std::ostream* os = &out;
  if (!a.out.empty()) {
    file.open(a.out, std::ios::trunc);
    if (!file) throw DataError("cannot write '" + a.out + "'");
    os = &file;
  }
  bool found = false;
  for (const PreparedDay& day : corpus.days) {
    if (split ? day.split != *split : day.id != a.day) continue;
    found = true;
    for (const auto& c : caption_day(sm.params, sm.vocab, day, dc)) *os << caption_json(c).dump() << "\n";
  }
  if (!found) throw DataError(split ? "no days in split " + a.split : "no day with id '" + a.day + "'");
  return kExitOk;
}

struct EvalArgs {
  std::string hyp, manifest, split = "test", out;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Split split;
  try {
    split = parse_split(a.split);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  const Manifest m = load_manifest(a.manifest, false);
  std::map<std::string, std::string> hyps;
  {
    std::ifstream f(a.hyp);
    if (!f) throw DataError("cannot open hypotheses '" + a.hyp + "'");
    std::string line;
    std::size_t n = 0;
    while (std::getline(f, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        hyps[j.at("event_id").get<std::string>()] = j.at("caption").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw DataError(a.hyp + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }
  if (hyps.empty()) throw DataError("hypotheses file '" + a.hyp + "' is empty");
  EvalCorpus corpus;
  std::vector<std::string> missing;
  for (const Day& d : m.days) {
    if (d.split != split) continue;
    for (const Event& e : d.events) {
      auto it = hyps.find(e.id);
      if (it == hyps.end()) {
        missing.push_back(e.id);
        continue;
      }
      EvalEntry entry{e.id, tokenize(it->second), {}};
      for (const auto& c : e.captions) entry.references.push_back(tokenize(c));
      corpus.push_back(std::move(entry));
    }
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw DataError("missing hypotheses for " + std::to_string(missing.size()) + " events: " + ids);
  }
  if (corpus.empty()) throw DataError("split " + a.split + " has no events");
  const EvalReport r = evaluate(corpus);
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < corpus.size(); ++i)
    per.push_back({{"event_id", corpus[i].id}, {"cider", r.per_sentence_cider[i]}});
  const nlohmann::json report{{"split", a.split},
                              {"events", corpus.size()},
                              {"bleu4", r.bleu4},
                              {"cider", r.cider},
                              {"per_sentence", per}};
  if (!a.out.empty()) detail::write_file(a.out, report.dump(2) + "\n");
  out << report.dump(2) << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::string variant = "all", precision = "extended";
  std::uint64_t seed = 1;
  double eps = 1e-5;
  bool train_mode = false;
};

inline constexpr double kGradcheckTolerance = 1e-4;

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  std::vector<Variant> variants;
  try {
    variants = a.variant == "all" ? all_variants() : std::vector<Variant>{parse_variant(a.variant)};
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  Precision precision;
  if (a.precision == "double")
    precision = Precision::Double;
  else if (a.precision == "extended")
    precision = Precision::Extended;
  else
    throw UsageError("--precision must be double or extended");
  if (!(a.eps > 0.0 && a.eps <= 1e-2)) throw UsageError("--eps must lie in (0, 1e-2]");

  bool pass = true;
  out << "gradcheck eps=" << a.eps << " precision=" << a.precision << " seed=" << a.seed
      << " mode=" << (a.train_mode ? "train" : "eval") << " tolerance=" << kGradcheckTolerance << "\n";
  for (Variant v : variants) {
    GradCheckConfig cfg;
    cfg.variant = v;
    cfg.train_mode = a.train_mode;
    const GradCheckResult r = finite_diff_check(cfg, a.seed, a.eps, precision);
    char line[256];
    for (const auto& [layer, err] : r.per_layer) {
      std::snprintf(line, sizeof line, "  %-20s %-28s max_rel_err=%.3e\n", to_string(v).c_str(),
                    layer.c_str(), err);
      out << line;
    }
    const bool ok = r.max_relative_error < kGradcheckTolerance;
    pass = pass && ok;
    std::snprintf(line, sizeof line,
                  "%-20s full model: %zu coords, max_rel_err=%.3e at %s[%zu] (analytic %.6e, "
                  "numeric %.6e) %s\n",
                  to_string(v).c_str(), r.coordinates, r.max_relative_error,
                  r.worst_parameter.c_str(), r.worst_index, r.worst_analytic, r.worst_numeric,
                  ok ? "ok" : "FAIL");
    out << line;
  }
  return pass ? kExitOk : kExitRuntime;
}

struct DatagenArgs {
  std::string out;
  std::size_t days = 20, events_per_day = 8, activities = 8, feature_dim = 16;
  std::uint64_t seed = 7;
  bool markov_random = false;
};

inline int cmd_datagen(const DatagenArgs& a, std::ostream& out) {
  SynthConfig sc;
  sc.seed = a.seed;
  sc.n_days = a.days;
  sc.events_per_day = a.events_per_day;
  sc.n_activities = a.activities;
  sc.feature_dim = a.feature_dim;
  sc.uniform_chain = !a.markov_random;
  Manifest m;
  try {
    m = synth_generate(sc, a.out);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const CorpusStats st = corpus_stats(m);
  std::size_t linked = 0;
  for (const Day& d : m.days) linked += link_events(d).size();
  out << "wrote " << (std::filesystem::path(a.out) / "manifest.json").string() << "\n"
      << format_stats(st) << "linked samples: " << linked << "\n";
  return kExitOk;
}

// ---- entry point --------------------------------------------------------

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Temporally-linked multi-input attention captioner", "tma"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a captioner (one run per seed)");
  train->add_option("--manifest", ta.manifest, "dataset manifest (JSON)")->required();
  train->add_option("--variant", ta.variant, "baseline | prev-caption | prev-video | prev-video-caption")->required();
  train->add_option("--optimizer", ta.optimizer, "adam | adadelta");
  train->add_option("--seed", ta.seeds, "seed or comma-separated seed list");
  train->add_option("--out", ta.out, "weight file (TMAW); sidecar and history written alongside")->required();
  train->add_option("--set", ta.sets, "override key=value (repeatable)");

  CaptionArgs ca;
  auto* caption = app.add_subcommand("caption", "chained beam-search captioning");
  caption->add_option("--model", ca.model, "weight file (TMAW)")->required();
  caption->add_option("--manifest", ca.manifest, "dataset manifest")->required();
  caption->add_option("--split", ca.split, "train | val | test");
  caption->add_option("--day", ca.day, "single day id");
  caption->add_option("--beam", ca.beam, "beam size");
  caption->add_option("--max-length", ca.max_length, "maximum caption length including EOS");
  caption->add_option("--out", ca.out, "output JSON-lines file (default stdout)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "BLEU-4 and CIDEr of captions against references");
  eval->add_option("--hyp", ea.hyp, "hypotheses (JSON lines from caption)")->required();
  eval->add_option("--manifest", ea.manifest, "dataset manifest")->required();
  eval->add_option("--split", ea.split, "train | val | test");
  eval->add_option("--out", ea.out, "also write the report here");

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--variant", ga.variant, "variant name or 'all'");
  gradcheck->add_option("--seed", ga.seed, "model and sample seed");
  gradcheck->add_option("--eps", ga.eps, "central-difference step");
  gradcheck->add_option("--precision", ga.precision, "double | extended");
  gradcheck->add_flag("--train-mode", ga.train_mode, "check the dropout/noise graph");

  DatagenArgs da;
  auto* datagen = app.add_subcommand("datagen", "generate a synthetic temporally-linked corpus");
  datagen->add_option("--out", da.out, "output directory")->required();
  datagen->add_option("--days", da.days, "number of days");
  datagen->add_option("--seed", da.seed, "generator seed");
  datagen->add_option("--activities", da.activities, "number of activities");
  datagen->add_option("--feature-dim", da.feature_dim, "feature dimension");
  datagen->add_option("--events-per-day", da.events_per_day, "events per day");
  datagen->add_flag("--random-chain", da.markov_random, "random instead of uniform transitions");

  std::vector<const char*> argv{"tma"};
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*train) return cmd_train(ta, out);
    if (*caption) return cmd_caption(ca, out);
    if (*eval) return cmd_eval(ea, out);
    if (*gradcheck) return cmd_gradcheck(ga, out);
    if (*datagen) return cmd_datagen(da, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

inline int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace tma::cli
