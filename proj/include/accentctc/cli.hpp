#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "accentctc/data_synth.hpp"
#include "accentctc/eval.hpp"
#include "accentctc/ngram_lm.hpp"
#include "accentctc/training.hpp"

namespace accentctc::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

namespace fs = std::filesystem;

/// Settings of one invocation after merging defaults, the config file and
/// flags (flags win).
struct Run {
  std::string command;
  Config cfg;
  fs::path workdir = ".";
  std::size_t threads = 1;
  std::ostream* out = &std::cout;

  fs::path path(const std::string& key) const {
    const fs::path p = cfg.get(key);
    return p.is_absolute() ? p : workdir / p;
  }

  fs::path required_path(const std::string& key, const std::string& flag) const {
    if (!cfg.has(key) || cfg.get(key).empty())
      throw UsageError(command + ": missing required " + flag);
    return path(key);
  }

  std::optional<fs::path> optional_path(const std::string& key) const {
    if (!cfg.has(key) || cfg.get(key).empty()) return std::nullopt;
    return path(key);
  }

  /// Settings without invocation paths, as embedded in checkpoints.
  Config model_settings() const {
    Config c;
    for (const auto& [k, v] : cfg.entries())
      if (!k.starts_with("cli.")) c.set(k, v);
    return c;
  }

  /// Creates the output directory and writes config.resolved into it.
  fs::path prepare_out() const {
    const fs::path dir = required_path("cli.out", "--out");
    fs::create_directories(dir);
    cfg.save(dir / "config.resolved");
    return dir;
  }
};

namespace detail {

inline Config defaults_for(const std::string& command) {
  Config c;
  if (command == "gen-data") {
    SynthSpec{}.to_config(c);
  } else if (command == "train-aid") {
    ModelConfig::toy().to_config(c);
    TrainConfig::accent_id_defaults().to_config(c);
  } else if (command == "train-asr") {
    ModelConfig::toy().to_config(c);
    TrainConfig{}.to_config(c);
  } else if (command == "train-lm") {
    const LmTrainOptions lm;
    c.set("lm.order", lm.order);
    c.set("lm.smoothing", to_string(lm.smoothing));
    c.set("lm.k", lm.k);
    c.set("lm.discount", lm.discount);
    c.set("cli.split", std::string("train"));
  } else if (command == "decode") {
    const DecodeOptions d;
    c.set("decode.beam_size", d.beam_size);
    c.set("decode.lm_weight", d.lm_weight);
    c.set("decode.word_insertion_penalty", d.word_insertion_penalty);
    c.set("decode.token_prune", d.token_prune);
    c.set("cli.split", std::string("test"));
  } else if (command == "eval-aid") {
    c.set("cli.split", std::string("test"));
  } else if (command == "eval-wer") {
    c.set("cli.split", std::string("test"));
    c.set("cli.name", std::string("system"));
    c.set("cli.baseline_name", std::string("baseline"));
  }
  return c;
}

/// Keys that receive the run seed for each command.
inline std::vector<std::string> seed_keys(const std::string& command) {
  if (command == "gen-data") return {"data.seed"};
  if (command == "train-aid" || command == "train-asr") return {"train.seed", "model.init_seed"};
  return {};
}

inline Dataset load_split(const Run& run, const std::string& split_name, bool signals = true) {
  const Dataset all = load_manifest(run.required_path("cli.data", "--data"), signals, run.threads);
  if (split_name == "all") return all;
  return select_split(all, split_name);
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

inline std::map<std::string, std::string> read_hyps(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open hypotheses " + p.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("hypotheses: expected id<TAB>text", n);
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

inline std::vector<std::string> hyps_for(const Dataset& data, const std::map<std::string, std::string>& hyps,
                                         const fs::path& source) {
  std::vector<std::string> out;
  for (const Utterance& u : data) {
    auto it = hyps.find(u.id);
    if (it == hyps.end()) throw DataError(source.string() + " has no hypothesis for " + u.id);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands

inline void gen_data(const Run& run) {
  const SynthSpec spec = SynthSpec::from_config(run.cfg);
  const fs::path dir = run.prepare_out();
  const Dataset data = generate_corpus(spec, dir);
  const std::size_t test = select_split(data, "test").size();
  *run.out << "gen-data: wrote " << data.size() << " utterances (" << data.size() - test
           << " train, " << test << " test) to " << dir.string() << '\n';
}

inline void train_aid(Run& run) {
  run.cfg.set("model.sdc_weight", run.cfg.get("train.sdc_weight"));
  const TrainConfig tc = TrainConfig::from_config(run.cfg, TrainConfig::accent_id_defaults());
  const ModelConfig mc = ModelConfig::from_config(run.cfg);
  std::optional<Checkpoint> init;
  if (auto p = run.optional_path("cli.init_ckpt")) init = load_checkpoint(*p);
  const Dataset train = detail::load_split(run, "train");
  const fs::path dir = run.prepare_out();
  auto result = train_accent_id<float>(tc, train, mc, init ? &*init : nullptr);
  save_checkpoint(dir / "model.ckpt", run.model_settings(), result.model->params());
  write_training_log(dir / "train_log.csv", result.log);
  *run.out << "train-aid: " << tc.max_updates << " updates on " << train.size()
           << " utterances, final loss " << (result.log.empty() ? 0.0 : result.log.back().loss)
           << '\n';
}

inline void train_asr_cmd(Run& run) {
  run.cfg.set("model.accent_mode", run.cfg.get("train.accent_mode"));
  const TrainConfig tc = TrainConfig::from_config(run.cfg, TrainConfig{});
  const ModelConfig mc = ModelConfig::from_config(run.cfg);
  std::unique_ptr<AccentIdModel<float>> aid;
  const auto aid_path = run.optional_path("cli.aid_ckpt");
  if (tc.accent_mode == AccentMode::dynamic && !aid_path)
    throw UsageError("train-asr: --accent-mode dynamic needs the frozen accent model; pass --aid-ckpt");
  if (aid_path) aid = load_accent_id<float>(load_checkpoint(*aid_path));
  const Dataset train = detail::load_split(run, "train");
  const fs::path dir = run.prepare_out();
  auto result = train_asr<float>(tc, train, mc, aid.get());
  save_checkpoint(dir / "model.ckpt", run.model_settings(), result.model->params());
  write_training_log(dir / "train_log.csv", result.log);
  *run.out << "train-asr: accent_mode=" << to_string(tc.accent_mode) << ", " << tc.max_updates
           << " updates on " << train.size() << " utterances, final loss "
           << (result.log.empty() ? 0.0 : result.log.back().loss) << '\n';
}

inline void train_lm_cmd(const Run& run) {
  LmTrainOptions opts;
  opts.order = run.cfg.get_u64("lm.order");
  opts.smoothing = parse_smoothing(run.cfg.get("lm.smoothing"));
  opts.k = run.cfg.get_double("lm.k");
  opts.discount = run.cfg.get_double("lm.discount");
  const Dataset data = detail::load_split(run, run.cfg.get("cli.split"), false);
  std::vector<std::vector<std::string>> corpus;
  for (const Utterance& u : data) corpus.push_back(split_words(u.transcript));
  const NGramLM lm = train_lm(corpus, opts);
  const fs::path dir = run.prepare_out();
  lm.save(dir / "lm.nglm");
  *run.out << "train-lm: order " << opts.order << " " << to_string(opts.smoothing) << " on "
           << corpus.size() << " sentences\n";
}

inline void decode_cmd(const Run& run) {
  DecodeOptions d;
  d.beam_size = run.cfg.get_u64("decode.beam_size");
  d.lm_weight = run.cfg.get_double("decode.lm_weight");
  d.word_insertion_penalty = run.cfg.get_double("decode.word_insertion_penalty");
  d.token_prune = run.cfg.get_double("decode.token_prune");
  if (d.lm_weight < 0.0) throw ConfigError("decode: lm_weight must be >= 0");
  *run.out << "decode: beam=" << d.beam_size << " wip=" << run.cfg.get("decode.word_insertion_penalty")
           << " lm_weight=" << run.cfg.get("decode.lm_weight") << '\n';

  const auto asr = load_asr<float>(load_checkpoint(run.required_path("cli.ckpt", "--ckpt")));
  std::unique_ptr<AccentIdModel<float>> aid;
  if (auto p = run.optional_path("cli.aid_ckpt")) aid = load_accent_id<float>(load_checkpoint(*p));
  if (asr->config().accent_mode == AccentMode::dynamic && !aid)
    throw UsageError("decode: the recognizer uses dynamic accent features; pass --aid-ckpt");
  std::optional<NGramLM> lm;
  if (auto p = run.optional_path("cli.lm")) lm = NGramLM::load(*p);
  const Dataset data = detail::load_split(run, run.cfg.get("cli.split"));
  const auto hyps = transcribe(*asr, data, d, lm ? &*lm : nullptr, aid.get());
  const fs::path dir = run.prepare_out();
  std::string text;
  for (std::size_t i = 0; i < data.size(); ++i) text += data[i].id + '\t' + hyps[i] + '\n';
  detail::write_text(dir / "hyp.tsv", text);
  *run.out << "decode: " << data.size() << " utterances -> " << (dir / "hyp.tsv").string() << '\n';
}

inline void eval_wer_cmd(const Run& run) {
  const Dataset data = detail::load_split(run, run.cfg.get("cli.split"), false);
  const fs::path hyp_path = run.required_path("cli.hyp", "--hyp");
  std::size_t n_accents = 0;
  for (const Utterance& u : data)
    if (u.accent) n_accents = std::max(n_accents, *u.accent + 1);
  std::vector<std::pair<std::string, WerReport>> systems;
  std::optional<double> baseline;
  if (auto b = run.optional_path("cli.baseline_hyp")) {
    systems.emplace_back(run.cfg.get("cli.baseline_name"),
                         wer_by_accent(data, detail::hyps_for(data, detail::read_hyps(*b), *b), n_accents));
    baseline = systems.back().second.all.wer();
  }
  systems.emplace_back(run.cfg.get("cli.name"),
                       wer_by_accent(data, detail::hyps_for(data, detail::read_hyps(hyp_path), hyp_path),
                                     n_accents));
  std::string text = wer_table_text(systems);
  if (baseline) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "relative WER reduction vs %s: %.1f%%\n",
                  run.cfg.get("cli.baseline_name").c_str(),
                  relative_reduction(*baseline, systems.back().second.all.wer()));
    text += buf;
  }
  const fs::path dir = run.prepare_out();
  detail::write_text(dir / "wer.txt", text);
  detail::write_text(dir / "wer.csv", wer_table_csv(systems));
  *run.out << text;
}

inline void eval_aid_cmd(const Run& run) {
  const auto aid = load_accent_id<float>(load_checkpoint(run.required_path("cli.ckpt", "--ckpt")));
  const Dataset data = detail::load_split(run, run.cfg.get("cli.split"));
  const AccentPredictions p = predict_accents(*aid, data);
  const AccentReport r = accent_eval(p.predicted, p.labels, aid->config().n_accents);
  const std::string name = run.cfg.get("cli.name", "accent_id");
  std::string text = accent_table_text({{name, r}});
  char buf[96];
  std::snprintf(buf, sizeof buf, "mean frame-prediction std: %.6f\n", p.mean_frame_std);
  text += buf;
  const fs::path dir = run.prepare_out();
  detail::write_text(dir / "accent.txt", text);
  detail::write_text(dir / "accent.csv", accent_table_csv({{name, r}}));
  *run.out << text;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv, runs one subcommand and maps failures to exit codes:
/// 1 usage/config, 2 data, 3 numeric.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"accentctc: accent-aware CTC speech recognition on synthetic accented speech"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Config flags;
  std::string config_file, workdir_flag;
  std::vector<std::string> sets;
  std::size_t threads = 1;
  std::optional<std::string> seed_flag;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "Settings file of 'key = value' lines");
    sub->add_option("--set", sets, "Override any setting as key=value (repeatable)");
    sub->add_option("--workdir", workdir_flag, "Directory all other paths are relative to");
    sub->add_option("--threads", threads, "Threads for loading signals")->check(CLI::PositiveNumber);
  };
  auto opt = [&](CLI::App* sub, const std::string& name, const std::string& key,
                 const std::string& help) {
    sub->add_option_function<std::string>(
        name, [&flags, key](const std::string& v) { flags.set(key, v); }, help);
  };
  auto seed = [&](CLI::App* sub) {
    sub->add_option_function<std::string>(
        "--seed", [&](const std::string& v) { seed_flag = v; },
        "Run seed (falls back to ACCENTCTC_SEED, then 1)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic accented corpus");
  common(gen);
  seed(gen);
  opt(gen, "--out", "cli.out", "Output directory");
  opt(gen, "--accents", "data.n_accents", "Number of accents");
  opt(gen, "--utts", "data.n_utterances", "Number of utterances");
  opt(gen, "--separation", "data.separation", "Accent template shift strength");
  opt(gen, "--noise", "data.noise_std", "Gaussian noise standard deviation");
  opt(gen, "--test-fraction", "data.test_fraction", "Fraction of utterances in the test split");
  opt(gen, "--samples-per-symbol", "data.samples_per_symbol", "Waveform samples per character");
  opt(gen, "--unlabeled-fraction", "data.unlabeled_fraction", "Fraction written without accent");

  CLI::App* aid = app.add_subcommand("train-aid", "Train the frame-level accent classifier");
  CLI::App* asr = app.add_subcommand("train-asr", "Train a CTC recognizer");
  for (CLI::App* sub : {aid, asr}) {
    common(sub);
    seed(sub);
    opt(sub, "--data", "cli.data", "Manifest path");
    opt(sub, "--out", "cli.out", "Output directory");
    opt(sub, "--steps", "train.max_updates", "Number of updates");
    opt(sub, "--lr", "train.learning_rate", "Peak learning rate");
    opt(sub, "--warmup", "train.warmup_steps", "Warmup updates");
    opt(sub, "--batch", "train.batch_size", "Utterances per update");
    opt(sub, "--freeze-encoder", "train.freeze_encoder", "Keep the conv encoder fixed (true/false)");
  }
  opt(aid, "--head-only", "train.head_only_updates", "Updates that train only the accent FC");
  opt(aid, "--sdc-weight", "train.sdc_weight", "Weight of the SDC term");
  opt(aid, "--init-ckpt", "cli.init_ckpt", "Checkpoint supplying encoder and context weights");
  opt(asr, "--accent-mode", "train.accent_mode", "none, true_label or dynamic");
  opt(asr, "--aid-ckpt", "cli.aid_ckpt", "Frozen accent classifier for dynamic mode");

  CLI::App* lm = app.add_subcommand("train-lm", "Train a word n-gram LM on transcripts");
  common(lm);
  opt(lm, "--data", "cli.data", "Manifest path");
  opt(lm, "--out", "cli.out", "Output directory");
  opt(lm, "--order", "lm.order", "N-gram order");
  opt(lm, "--smoothing", "lm.smoothing", "katz or add_k");
  opt(lm, "--split", "cli.split", "train, test or all");

  CLI::App* dec = app.add_subcommand("decode", "Transcribe a split with a trained recognizer");
  common(dec);
  opt(dec, "--data", "cli.data", "Manifest path");
  opt(dec, "--ckpt", "cli.ckpt", "Recognizer checkpoint");
  opt(dec, "--aid-ckpt", "cli.aid_ckpt", "Accent classifier for dynamic recognizers");
  opt(dec, "--lm", "cli.lm", "N-gram LM for shallow fusion");
  opt(dec, "--out", "cli.out", "Output directory");
  opt(dec, "--beam", "decode.beam_size", "Beam size (0 = greedy)");
  opt(dec, "--wip", "decode.word_insertion_penalty", "Word insertion penalty");
  opt(dec, "--lm-weight", "decode.lm_weight", "LM weight");
  opt(dec, "--split", "cli.split", "train, test or all");

  CLI::App* ew = app.add_subcommand("eval-wer", "Score hypotheses against references");
  common(ew);
  opt(ew, "--data", "cli.data", "Manifest path");
  opt(ew, "--hyp", "cli.hyp", "Hypotheses (id<TAB>text)");
  opt(ew, "--baseline-hyp", "cli.baseline_hyp", "Baseline hypotheses for relative reduction");
  opt(ew, "--name", "cli.name", "Row name of the system");
  opt(ew, "--baseline-name", "cli.baseline_name", "Row name of the baseline");
  opt(ew, "--out", "cli.out", "Output directory");
  opt(ew, "--split", "cli.split", "train, test or all");

  CLI::App* ea = app.add_subcommand("eval-aid", "Accent identification accuracy");
  common(ea);
  opt(ea, "--data", "cli.data", "Manifest path");
  opt(ea, "--ckpt", "cli.ckpt", "Accent classifier checkpoint");
  opt(ea, "--out", "cli.out", "Output directory");
  opt(ea, "--split", "cli.split", "train, test or all");
  opt(ea, "--name", "cli.name", "Row name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kUsage;
  }

  Run run;
  run.out = &out;
  run.threads = threads;
  run.command = app.get_subcommands().front()->get_name();
  try {
    Config file;
    const fs::path flag_workdir = workdir_flag.empty() ? fs::path(".") : fs::path(workdir_flag);
    if (!config_file.empty()) {
      const fs::path p = config_file;
      file = Config::load(p.is_absolute() ? p : flag_workdir / p);
    }
    run.cfg = detail::defaults_for(run.command);
    run.cfg.merge(file);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0)
        throw UsageError("--set expects key=value, got '" + s + "'");
      flags.set(std::string(trim(s.substr(0, eq))), std::string(trim(s.substr(eq + 1))));
    }
    run.cfg.merge(flags);
    if (!workdir_flag.empty()) run.cfg.set("cli.workdir", workdir_flag);
    run.workdir = run.cfg.get("cli.workdir", ".");

    const auto keys = detail::seed_keys(run.command);
    if (seed_flag) {
      for (const auto& k : keys) run.cfg.set(k, *seed_flag);
    } else if (const char* env = std::getenv("ACCENTCTC_SEED")) {
      for (const auto& k : keys)
        if (!file.has(k) && !flags.has(k)) run.cfg.set(k, std::string(env));
    }
    run.cfg.set("cli.command", run.command);

    if (run.command == "gen-data") gen_data(run);
    else if (run.command == "train-aid") train_aid(run);
    else if (run.command == "train-asr") train_asr_cmd(run);
    else if (run.command == "train-lm") train_lm_cmd(run);
    else if (run.command == "decode") decode_cmd(run);
    else if (run.command == "eval-wer") eval_wer_cmd(run);
    else if (run.command == "eval-aid") eval_aid_cmd(run);
    return kOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kData;
  }
}

}  // namespace accentctc::cli
