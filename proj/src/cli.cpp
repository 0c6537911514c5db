#include "gnmt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

#include "gnmt/bleu.hpp"
#include "gnmt/config.hpp"
#include "gnmt/corpus.hpp"
#include "gnmt/decoding.hpp"
#include "gnmt/error.hpp"
#include "gnmt/model.hpp"
#include "gnmt/pmi.hpp"
#include "gnmt/training.hpp"
#include "gnmt/vocab.hpp"

namespace gnmt {

namespace {

using Overrides = std::map<std::string, std::optional<std::string>>;

struct Command {
  std::string name;
  std::string description;
  std::vector<std::string> keys;
};

const std::vector<Command>& commands() {
  static const std::vector<Command> kCommands = {
      {"build-vocab", "Build a frequency-sorted vocabulary from a corpus", {"corpus", "vocab_size", "output"}},
      {"build-pmi",
       "Count bilingual and monolingual PMI tables from a parallel corpus",
       {"train_src", "train_tgt", "bilingual_pmi", "monolingual_pmi"}},
      {"gen-supervision",
       "Write per-token source/target attribution labels",
       {"train_src", "train_tgt", "bilingual_pmi", "monolingual_pmi", "supervision", "supervision_debug"}},
      {"train",
       "Train a model and write checkpoints and a metrics log",
       {"train_src", "train_tgt", "src_vocab", "tgt_vocab", "supervision", "checkpoint", "metrics_log", "gate_mode",
        "num_layers", "num_heads", "model_dim", "ff_dim", "max_len", "dropout", "lambda", "layers", "warmup_steps",
        "lr_scale", "max_tokens_per_batch", "max_steps", "checkpoint_every", "log_every", "seed", "label_smoothing",
        "penalty_normalization", "adam_beta1", "adam_beta2", "adam_eps"}},
      {"translate", "Beam-search translate a source file", {"checkpoint", "input", "output", "beam", "alpha",
                                                            "max_decode_len"}},
      {"score", "Teacher-forced log-probability of each reference", {"checkpoint", "test_src", "test_tgt", "output"}},
      {"analyze",
       "Forced-decoding error analysis and gate statistics",
       {"checkpoint", "test_src", "test_tgt", "bilingual_pmi", "monolingual_pmi", "output"}},
      {"bleu", "Corpus BLEU, optionally per source-length bucket", {"hypotheses", "references", "sources", "buckets",
                                                                     "output"}},
  };
  return kCommands;
}

std::string flag_for(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

void finish_output(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("failed writing " + path);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  return lines;
}

std::vector<std::vector<int>> load_supervision(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  return read_supervision(in);
}

void check_supervision(const std::vector<std::vector<int>>& labels, const std::vector<Sentence>& targets) {
  if (labels.size() != targets.size()) {
    throw AlignmentError("supervision has " + std::to_string(labels.size()) + " lines but the target corpus has " +
                         std::to_string(targets.size()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != targets[i].size()) {
      throw AlignmentError("supervision line " + std::to_string(i + 1) + " has " + std::to_string(labels[i].size()) +
                           " labels for " + std::to_string(targets[i].size()) + " target tokens");
    }
  }
}

struct LoadedModel {
  Model model;
  Vocab src_vocab;
  Vocab tgt_vocab;
};

LoadedModel load_model(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  auto vocab_from = [&](const std::string& key) {
    auto it = ck.extras.find(key);
    if (it == ck.extras.end()) throw IoError(path + ": checkpoint lacks '" + key + "'");
    return Vocab::from_tokens(it->second);
  };
  Vocab src = vocab_from("src_vocab");
  Vocab tgt = vocab_from("tgt_vocab");
  if (src.size() != ck.model.config().src_vocab_size || tgt.size() != ck.model.config().tgt_vocab_size) {
    throw IoError(path + ": embedded vocabularies do not match the model dimensions");
  }
  return {std::move(ck.model), std::move(src), std::move(tgt)};
}

// ---------------------------------------------------------------------------

int cmd_build_vocab(const Config& cfg) {
  const auto corpus = load_corpus(cfg.require("corpus"));
  const std::size_t limit = cfg.get_size("vocab_size", 32000);
  save_vocab(cfg.require("output"), Vocab::build(corpus, limit));
  return kExitOk;
}

int cmd_build_pmi(const Config& cfg) {
  const auto pc = load_parallel(cfg.require("train_src"), cfg.require("train_tgt"));
  const std::string bi_path = cfg.require("bilingual_pmi");
  const std::string mono_path = cfg.require("monolingual_pmi");
  save_pmi_table(bi_path, count_bilingual(pc.sources, pc.targets));
  save_pmi_table(mono_path, count_monolingual(pc.targets));
  return kExitOk;
}

int cmd_gen_supervision(const Config& cfg) {
  const auto pc = load_parallel(cfg.require("train_src"), cfg.require("train_tgt"));
  const PmiTable bi = load_pmi_table(cfg.require("bilingual_pmi"));
  const PmiTable mono = load_pmi_table(cfg.require("monolingual_pmi"));
  if (bi.scenario() != Scenario::kBilingual) throw ConfigError("bilingual_pmi holds a " + to_string(bi.scenario()) + " table");
  if (mono.scenario() != Scenario::kMonolingual) {
    throw ConfigError("monolingual_pmi holds a " + to_string(mono.scenario()) + " table");
  }
  const std::string out_path = cfg.require("supervision");
  const auto debug_path = cfg.get("supervision_debug");

  std::vector<std::vector<int>> labels(pc.targets.size());
  std::unique_ptr<std::ofstream> debug;
  if (debug_path && !debug_path->empty()) {
    debug = std::make_unique<std::ofstream>(open_output(*debug_path));
    *debug << "line\tposition\ttoken\tbest_source\tbest_target\tbest_source_without_z\tbest_target_without_z\tlabel\n";
  }
  for (std::size_t n = 0; n < pc.targets.size(); ++n) {
    const auto& tgt = pc.targets[n];
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      const auto d = label_token(tgt[i], pc.sources[n], std::span<const std::string>(tgt.data(), i), bi, mono);
      labels[n].push_back(d.label);
      if (debug) {
        *debug << n + 1 << '\t' << i + 1 << '\t' << tgt[i] << '\t' << format_double(d.best_source) << '\t'
               << format_double(d.best_target) << '\t' << format_double(d.best_source_without_normalizer) << '\t'
               << format_double(d.best_target_without_normalizer) << '\t' << d.label << '\n';
      }
    }
  }
  if (debug) finish_output(*debug, *debug_path);
  auto out = open_output(out_path);
  write_supervision(out, labels);
  finish_output(out, out_path);
  return kExitOk;
}

ModelConfig model_config_from(const Config& cfg, std::size_t src_vocab, std::size_t tgt_vocab) {
  ModelConfig mc;
  mc.src_vocab_size = src_vocab;
  mc.tgt_vocab_size = tgt_vocab;
  mc.num_layers = cfg.get_size("num_layers", mc.num_layers);
  mc.num_heads = cfg.get_size("num_heads", mc.num_heads);
  mc.model_dim = cfg.get_size("model_dim", mc.model_dim);
  mc.ff_dim = cfg.get_size("ff_dim", mc.ff_dim);
  mc.max_len = cfg.get_size("max_len", mc.max_len);
  mc.dropout = cfg.get_double("dropout", mc.dropout);
  mc.gate_mode = parse_gate_mode(cfg.get_string("gate_mode", to_string(mc.gate_mode)));
  mc.validate();
  return mc;
}

TrainConfig train_config_from(const Config& cfg) {
  TrainConfig tc;
  tc.lambda = cfg.get_double("lambda", tc.lambda);
  if (auto layers = cfg.get("layers")) tc.regularized_layers = parse_layer_list(*layers);
  tc.warmup_steps = cfg.get_size("warmup_steps", tc.warmup_steps);
  tc.lr_scale = cfg.get_double("lr_scale", tc.lr_scale);
  tc.max_tokens_per_batch = cfg.get_size("max_tokens_per_batch", tc.max_tokens_per_batch);
  tc.max_steps = cfg.get_size("max_steps", tc.max_steps);
  tc.checkpoint_every = cfg.get_size("checkpoint_every", tc.checkpoint_every);
  tc.log_every = cfg.get_size("log_every", tc.log_every);
  tc.seed = cfg.get_u64("seed", tc.seed);
  tc.label_smoothing = cfg.get_double("label_smoothing", tc.label_smoothing);
  if (auto n = cfg.get("penalty_normalization")) tc.penalty_normalization = parse_penalty_normalization(*n);
  tc.adam.beta1 = cfg.get_double("adam_beta1", tc.adam.beta1);
  tc.adam.beta2 = cfg.get_double("adam_beta2", tc.adam.beta2);
  tc.adam.eps = cfg.get_double("adam_eps", tc.adam.eps);
  return tc;
}

int cmd_train(const Config& cfg) {
  const auto pc = load_parallel(cfg.require("train_src"), cfg.require("train_tgt"));
  const Vocab src_vocab = load_vocab(cfg.require("src_vocab"));
  const Vocab tgt_vocab = load_vocab(cfg.require("tgt_vocab"));
  const std::string ckpt_path = cfg.require("checkpoint");
  const std::string log_path = cfg.get_string("metrics_log", ckpt_path + ".metrics.tsv");

  const ModelConfig mc = model_config_from(cfg, src_vocab.size(), tgt_vocab.size());
  const TrainConfig tc = train_config_from(cfg);
  tc.validate(mc);

  std::vector<std::vector<int>> labels;
  if (auto sup = cfg.get("supervision"); sup && !sup->empty()) {
    labels = load_supervision(*sup);
    check_supervision(labels, pc.targets);
  }

  std::vector<TrainingExample> examples(pc.sources.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    examples[i].src = src_vocab.encode(pc.sources[i]);
    examples[i].tgt = tgt_vocab.encode(pc.targets[i]);
    if (!labels.empty()) examples[i].labels = labels[i];
  }

  std::ostringstream settings;
  cfg.write(settings);
  CheckpointExtras extras;
  extras["src_vocab"] = src_vocab.tokens();
  extras["tgt_vocab"] = tgt_vocab.tokens();
  extras["train_config"] = split_lines(settings.str());

  Model model(mc, tc.seed);
  auto log = open_output(log_path);
  TrainCallbacks callbacks;
  callbacks.on_log = [&](const MetricsRow& row) {
    log << format_metrics_row(row) << '\n';
    log.flush();
  };
  callbacks.on_checkpoint = [&](std::size_t step, const Model& m) {
    save_checkpoint(ckpt_path + ".step" + std::to_string(step), m, extras);
  };
  train(model, examples, tc, callbacks);
  finish_output(log, log_path);
  save_checkpoint(ckpt_path, model, extras);
  return kExitOk;
}

int cmd_translate(const Config& cfg, std::ostream& stdout_stream) {
  const LoadedModel lm = load_model(cfg.require("checkpoint"));
  const auto sources = load_corpus(cfg.require("input"));
  BeamOptions opts;
  opts.beam_size = cfg.get_size("beam", opts.beam_size);
  opts.alpha = cfg.get_double("alpha", opts.alpha);
  opts.max_len = cfg.get_size("max_decode_len", opts.max_len);
  if (opts.beam_size == 0) throw ConfigError("beam must be at least 1");

  std::vector<Sentence> outputs(sources.size());
  parallel_for(sources.size(), evaluation_threads(), [&](std::size_t i) {
    const Hypothesis h = beam_search(lm.model, lm.src_vocab.encode(sources[i]), opts);
    outputs[i] = lm.tgt_vocab.decode(h.tokens);
  });
  if (auto path = cfg.get("output"); path && !path->empty()) {
    auto out = open_output(*path);
    write_corpus(out, outputs);
    finish_output(out, *path);
  } else {
    write_corpus(stdout_stream, outputs);
  }
  return kExitOk;
}

int cmd_score(const Config& cfg, std::ostream& stdout_stream) {
  const LoadedModel lm = load_model(cfg.require("checkpoint"));
  const auto pc = load_parallel(cfg.require("test_src"), cfg.require("test_tgt"));
  std::vector<double> scores(pc.sources.size());
  parallel_for(pc.sources.size(), evaluation_threads(), [&](std::size_t i) {
    std::vector<int> tokens = lm.tgt_vocab.encode(pc.targets[i]);
    tokens.push_back(kEosId);
    scores[i] = score_tokens(lm.model, lm.src_vocab.encode(pc.sources[i]), tokens);
  });
  auto emit = [&](std::ostream& os) {
    os << "line\tlogprob\ttokens\n";
    for (std::size_t i = 0; i < scores.size(); ++i) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.6f", scores[i]);
      os << i + 1 << '\t' << buf << '\t' << pc.targets[i].size() + 1 << '\n';
    }
  };
  if (auto path = cfg.get("output"); path && !path->empty()) {
    auto out = open_output(*path);
    emit(out);
    finish_output(out, *path);
  } else {
    emit(stdout_stream);
  }
  return kExitOk;
}

int cmd_analyze(const Config& cfg, std::ostream& stdout_stream, std::ostream& err) {
  const LoadedModel lm = load_model(cfg.require("checkpoint"));
  const auto pc = load_parallel(cfg.require("test_src"), cfg.require("test_tgt"));
  const PmiTable bi = load_pmi_table(cfg.require("bilingual_pmi"));
  const PmiTable mono = load_pmi_table(cfg.require("monolingual_pmi"));
  if (bi.scenario() != Scenario::kBilingual || mono.scenario() != Scenario::kMonolingual) {
    throw ConfigError("bilingual_pmi and monolingual_pmi must hold BILINGUAL and MONOLINGUAL tables");
  }
  if (pc.sources.empty()) throw ContractError("analyze needs a non-empty test set");

  const bool gated = lm.model.config().gate_mode == GateMode::kGated;
  std::vector<ErrorCounts> counts(pc.sources.size());
  std::vector<RunningMoments> moments(pc.sources.size());
  parallel_for(pc.sources.size(), evaluation_threads(), [&](std::size_t i) {
    const ForcedDecoding fd =
        forced_decode(lm.model, lm.src_vocab.encode(pc.sources[i]), lm.tgt_vocab.encode(pc.targets[i]));
    counts[i] = context_selection_errors(fd, pc.sources[i], pc.targets[i], lm.tgt_vocab.tokens(), bi, mono);
    if (gated) moments[i] = gate_moments(fd);
  });
  ErrorCounts total;
  RunningMoments gates;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    total.add(counts[i]);
    gates.merge(moments[i]);
  }
  const ErrorReport report = make_error_report(total);

  auto emit = [&](std::ostream& os) {
    os << "FER\t" << format_double(report.fer) << '\n';
    os << "CER\t" << format_double(report.cer) << '\n';
    os << "CE/FE\t" << format_double(report.ce_over_fe) << '\n';
    os << "gate_mean\t" << (gated ? format_double(gates.mean()) : "NA") << '\n';
    os << "gate_variance\t" << (gated ? format_double(gates.variance()) : "NA") << '\n';
  };
  if (auto path = cfg.get("output"); path && !path->empty()) {
    auto out = open_output(*path);
    emit(out);
    finish_output(out, *path);
  } else {
    emit(stdout_stream);
  }
  err << "analyze: rates are over " << report.token_count << " target tokens (EOS included)\n";
  return kExitOk;
}

std::vector<std::size_t> parse_edges(const std::string& text) {
  std::vector<std::size_t> edges;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item[0] == '-') throw ConfigError("buckets: '" + item + "' is not a length");
    edges.push_back(v);
  }
  return edges;
}

int cmd_bleu(const Config& cfg, std::ostream& stdout_stream) {
  const auto hyps = load_corpus(cfg.require("hypotheses"), /*allow_empty=*/true);
  const auto refs = load_corpus(cfg.require("references"));
  const double score = bleu(hyps, refs);
  stdout_stream << "BLEU\t" << format_double(score) << '\n';
  if (auto bucket_text = cfg.get("buckets")) {
    const auto sources = load_corpus(cfg.require("sources"));
    const auto buckets = bucketed_eval(hyps, refs, sources, parse_edges(*bucket_text));
    const std::string path = cfg.require("output");
    auto out = open_output(path);
    write_bucket_tsv(out, buckets);
    finish_output(out, path);
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Context-gated Transformer NMT toolkit", "gated-nmt"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand and exit");

  std::map<std::string, Overrides> overrides;
  std::map<std::string, std::string> config_paths;
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : commands()) {
    CLI::App* sub = app.add_subcommand(c.name, c.description);
    subs[c.name] = sub;
    sub->add_option("--config", config_paths[c.name], "key=value settings file");
    auto& ov = overrides[c.name];
    for (const auto& key : c.keys) {
      ov[key];
      sub->add_option_function<std::string>(
          flag_for(key), [&ov, key](const std::string& v) { ov[key] = v; }, "overrides '" + key + "'");
    }
  }

  std::vector<std::string> argv_storage;
  argv_storage.emplace_back("gated-nmt");
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "gated-nmt: error: " << e.what() << '\n';
    return kExitUsage;
  }

  std::string name;
  for (const auto& [n, sub] : subs) {
    if (sub->parsed()) name = n;
  }

  try {
    Config cfg;
    if (!config_paths[name].empty()) cfg = Config::load(config_paths[name]);
    for (const auto& [key, value] : overrides[name]) {
      if (value) cfg.set(key, *value);
    }
    if (name == "build-vocab") return cmd_build_vocab(cfg);
    if (name == "build-pmi") return cmd_build_pmi(cfg);
    if (name == "gen-supervision") return cmd_gen_supervision(cfg);
    if (name == "train") return cmd_train(cfg);
    if (name == "translate") return cmd_translate(cfg, out);
    if (name == "score") return cmd_score(cfg, out);
    if (name == "analyze") return cmd_analyze(cfg, out, err);
    if (name == "bleu") return cmd_bleu(cfg, out);
    throw UsageError("no subcommand given");
  } catch (const UsageError& e) {
    err << "gated-nmt " << name << ": error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "gated-nmt " << name << ": error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace gnmt
