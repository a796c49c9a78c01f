// smclm: corpus tooling, training, generation and evaluation from one binary.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "smclm/checkpoint.hpp"
#include "smclm/corpus.hpp"
#include "smclm/decoding.hpp"
#include "smclm/encoder.hpp"
#include "smclm/metrics.hpp"
#include "smclm/pipeline.hpp"
#include "smclm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace smclm;

namespace {

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SMCLM_THREADS")) {
    try {
      const auto cap = std::stoul(env);
      if (cap > 0) n = std::min<std::size_t>(n, cap);
    } catch (const std::exception&) {
      fail(ErrorKind::config, std::string("SMCLM_THREADS is not a positive integer: ") + env);
    }
  }
  return n;
}

std::ifstream open_input(const std::string& path) {
  require(!path.empty(), ErrorKind::config, "missing required input path");
  require(fs::exists(path), ErrorKind::io, "input path does not exist: " + path);
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open input: " + path);
  return in;
}

std::vector<std::string> read_lines(const std::string& path) {
  auto in = open_input(path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::vector<json> read_jsonl(const std::string& path) {
  auto in = open_input(path);
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      fail(ErrorKind::format, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  binio::write_atomically(path, [&](std::ostream& out) {
    for (const auto& l : lines) out << l << '\n';
  });
}

template <typename Range>
void write_jsonl(const std::string& path, const Range& items) {
  binio::write_atomically(path, [&](std::ostream& out) {
    for (const auto& item : items) out << json(item).dump() << '\n';
  });
}

json read_json_file(const std::string& path) {
  auto in = open_input(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, path + ": " + e.what());
  }
}

/// Encoder from --encoder (JSON spec file) or --embeddings (SMEM file); null if neither.
std::unique_ptr<SentenceEncoder> encoder_from_flags(const std::string& spec_path, const std::string& embeddings) {
  require(spec_path.empty() || embeddings.empty(), ErrorKind::config, "give either --encoder or --embeddings, not both");
  if (!spec_path.empty()) return make_encoder(read_json_file(spec_path));
  if (!embeddings.empty()) {
    require(fs::exists(embeddings), ErrorKind::io, "input path does not exist: " + embeddings);
    return std::make_unique<FileBackedEncoder>(FileBackedEncoder::load(embeddings));
  }
  return nullptr;
}

json defaults_json() {
  return {{"train", TrainConfig{}},
          {"model", ModelConfig{}},
          {"generate", BeamSearchConfig{}},
          {"selection_beta", 2.0},
          {"evaluate", {{"beta", 2.0}, {"bleu_order", 3}}},
          {"split", {{"train", 0.80}, {"valid", 0.05}, {"test", 0.15}}},
          {"corpus", {{"min_chars", 10}}}};
}

struct Common {
  std::uint64_t seed = 0;
  bool strict = false;
};

// ---------------------------------------------------------------------------

struct BuildCorpusArgs {
  std::string sources, output, manifest;
  std::size_t target = 0;
  std::size_t min_chars = 10;
};

json cmd_build_corpus(const BuildCorpusArgs& a, const Common& c) {
  std::vector<DocumentSource> sources;
  for (const auto& j : read_jsonl(a.sources)) {
    DocumentSource s;
    s.domain = j.at("domain").get<std::string>();
    s.name = j.value("name", std::string{});
    s.documents = j.at("documents").get<std::vector<std::string>>();
    sources.push_back(std::move(s));
  }
  CorpusOptions opt;
  opt.target_count = a.target;
  opt.seed = c.seed;
  opt.min_chars = a.min_chars;
  const auto corpus = build_corpus(sources, opt);
  write_lines(a.output, corpus.sentences);
  const json manifest = corpus.manifest;
  if (!a.manifest.empty()) {
    binio::write_atomically(a.manifest, [&](std::ostream& out) { out << manifest.dump(2) << '\n'; });
  }
  return {{"admitted", corpus.manifest.admitted},
          {"shortfall", corpus.manifest.shortfall},
          {"exhausted", corpus.manifest.exhausted},
          {"output", a.output}};
}

struct SplitArgs {
  std::string groups, output_dir;
  double train = 0.80, valid = 0.05, test = 0.15;
};

json cmd_split_dataset(const SplitArgs& a, const Common& c) {
  std::vector<ParaphraseGroup> groups;
  for (const auto& j : read_jsonl(a.groups)) groups.push_back(j.get<ParaphraseGroup>());
  const auto plan = split_groups(groups, SplitRatios{a.train, a.valid, a.test}, c.seed);
  fs::create_directories(a.output_dir);

  std::map<std::string, const ParaphraseGroup*> by_id;
  for (const auto& g : groups) by_id[g.id] = &g;
  const auto flat = flatten_unsupervised(plan, groups);
  json summary{{"output_dir", a.output_dir}};
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string name(kSplitNames[s]);
    std::vector<ParaphraseGroup> members;
    std::vector<json> pairs;
    for (const auto& id : plan.groups[s]) {
      const auto& g = *by_id.at(id);
      members.push_back(g);
      if (g.sentences.size() < 2) continue;
      const auto p = make_supervised_pairs(g, c.seed);
      std::vector<std::string> refs;
      for (const auto& [_, r] : p) refs.push_back(r);
      pairs.push_back({{"source", p.front().first}, {"references", refs}});
    }
    const fs::path dir(a.output_dir);
    write_jsonl((dir / (name + ".groups.jsonl")).string(), members);
    write_jsonl((dir / (name + ".pairs.jsonl")).string(), pairs);
    write_lines((dir / (name + ".txt")).string(), flat[s]);
    summary[name] = plan.groups[s].size();
  }
  return summary;
}

struct VocabArgs {
  std::string corpus, output;
  std::size_t min_freq = 1;
};

json cmd_build_vocab(const VocabArgs& a) {
  const auto lines = read_lines(a.corpus);
  const auto vocab = build_vocabulary(lines, a.min_freq);
  binio::write_atomically(a.output, [&](std::ostream& out) { write_vocabulary(vocab, out); });
  return {{"size", vocab.size()}, {"output", a.output}};
}

struct TrainArgs {
  std::string corpus, valid, vocab, output, init, log, encoder, embeddings;
  std::string mode = "smclm";
  ModelConfig model{};
  std::optional<std::size_t> embed_dim;
  TrainConfig train{};
  double clip = 0.0;
};

json cmd_train(TrainArgs a, const Common& c) {
  a.train.mode = a.mode == "clm" ? TrainMode::clm : TrainMode::smclm;
  a.train.seed = c.seed;
  a.train.threads = worker_threads();
  if (a.clip > 0.0) a.train.gradient_clip_norm = a.clip;

  const auto encoder = encoder_from_flags(a.encoder, a.embeddings);
  require(a.train.mode == TrainMode::clm || encoder, ErrorKind::config,
          "--mode smclm needs a sentence encoder (--encoder or --embeddings)");

  Checkpoint ck;
  if (!a.init.empty()) {
    require(fs::exists(a.init), ErrorKind::io, "input path does not exist: " + a.init);
    ck = load_checkpoint(a.init);
  } else {
    require(!a.vocab.empty(), ErrorKind::config, "train needs --vocab (or --init to continue a checkpoint)");
    auto in = open_input(a.vocab);
    ck.vocab = read_vocabulary(in);
    ck.vocab_path = a.vocab;
    auto cfg = a.model;
    cfg.vocab_size = ck.vocab.size();
    cfg.seed = c.seed;
    if (a.embed_dim) {
      cfg.embed_dim = *a.embed_dim;
    } else if (encoder && a.train.mode == TrainMode::smclm) {
      cfg.embed_dim = encoder->dim();
    }
    ck.params = ModelParams<float>::initialize(cfg);
  }
  if (encoder && a.train.mode == TrainMode::smclm) {
    require(encoder->dim() == ck.params.config.embed_dim, ErrorKind::dimension,
            "encoder dim " + std::to_string(encoder->dim()) + " != model embed_dim " +
                std::to_string(ck.params.config.embed_dim));
    ck.encoder_spec = encoder->spec();
  }

  const auto corpus = read_lines(a.corpus);
  const auto valid = a.valid.empty() ? std::vector<std::string>{} : read_lines(a.valid);
  std::optional<std::ofstream> log;
  if (!a.log.empty()) {
    log.emplace(a.log, std::ios::trunc);
    require(static_cast<bool>(*log), ErrorKind::io, "cannot open log for writing: " + a.log);
  }
  const auto report = train(ck.params, ck.vocab, encoder.get(), corpus, valid, a.train, [&](const StepLog& s) {
    if (log) *log << json(s).dump() << '\n';
  });
  ck.extra = {{"train", a.train}};
  save_checkpoint(ck, a.output);
  json summary = report;
  summary["final_loss"] = report.epoch_losses.back();
  summary["output"] = a.output;
  return summary;
}

struct GenerateArgs {
  std::string checkpoint, input, output, encoder, embeddings;
  BeamSearchConfig decode{};
  std::optional<std::size_t> max_length;
  double beta = 2.0;
  bool skip_errors = false;
};

json cmd_generate(GenerateArgs a) {
  require(fs::exists(a.checkpoint), ErrorKind::io, "input path does not exist: " + a.checkpoint);
  const auto ck = load_checkpoint(a.checkpoint);
  auto encoder = encoder_from_flags(a.encoder, a.embeddings);
  if (!encoder) {
    require(!ck.encoder_spec.is_null(), ErrorKind::config,
            "checkpoint has no encoder spec; pass --encoder or --embeddings");
    encoder = make_encoder(ck.encoder_spec);
  }
  require(encoder->dim() == ck.params.config.embed_dim, ErrorKind::dimension,
          "encoder dim " + std::to_string(encoder->dim()) + " != checkpoint embed_dim " +
              std::to_string(ck.params.config.embed_dim));
  a.decode.max_length = a.max_length.value_or(std::min<std::size_t>(32, ck.params.config.max_positions));
  a.decode.validate();

  const auto sources = read_lines(a.input);
  BatchOptions batch;
  batch.fail_fast = !a.skip_errors;
  batch.threads = worker_threads();
  const auto result = paraphrase_batch(sources, ck.params, ck.vocab, *encoder, a.decode, SelectionConfig{a.beta}, batch);
  for (const auto& [i, msg] : result.errors) {
    std::cerr << json{{"skipped", i}, {"message", msg}}.dump() << '\n';
  }
  write_jsonl(a.output, result.sets);
  return {{"sources", sources.size()}, {"written", result.sets.size()}, {"output", a.output}};
}

struct EvaluateArgs {
  std::string records, candidates, output, table, fluency, encoder, embeddings;
  bool copy_input = false;
  bool reference_max = false;
  double beta = 2.0;
  std::size_t encoder_dim = 256;
  std::size_t token_dim = 64;
};

json cmd_evaluate(const EvaluateArgs& a, const Common& c) {
  const auto raw = read_jsonl(a.records);
  std::vector<EvalRecord> records;
  for (const auto& j : raw) {
    EvalRecord r;
    r.source = j.at("source").get<std::string>();
    r.references = j.value("references", std::vector<std::string>{});
    if (j.contains("candidates")) r.candidates = j.at("candidates").get<std::vector<std::string>>();
    r.best = j.value("best", std::size_t{0});
    records.push_back(std::move(r));
  }
  if (a.copy_input) {
    for (auto& r : records) {
      r.candidates = {r.source};
      r.best = 0;
    }
  } else if (!a.candidates.empty()) {
    const auto sets = read_jsonl(a.candidates);
    require(sets.size() == records.size(), ErrorKind::input,
            "candidates file has " + std::to_string(sets.size()) + " records, test file has " +
                std::to_string(records.size()));
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto set = sets[i].get<CandidateSet>();
      require(set.source == records[i].source, ErrorKind::input,
              "record " + std::to_string(i) + ": candidate source does not match test source");
      records[i].candidates = set.candidates;
      records[i].best = set.best;
    }
  }

  EvalConfig cfg;
  cfg.beta = a.beta;
  cfg.reference_max = a.reference_max;
  cfg.strict = c.strict;
  if (!a.fluency.empty()) {
    std::unordered_map<std::string, double> scores;
    for (const auto& j : read_jsonl(a.fluency)) {
      scores[to_hex(sha256(j.at("sentence").get<std::string>()))] = j.at("score").get<double>();
    }
    cfg.fluency = std::move(scores);
  }
  auto encoder = encoder_from_flags(a.encoder, a.embeddings);
  if (!encoder) encoder = std::make_unique<HashedBagEncoder>(a.encoder_dim, 0);
  const HashedTokenEmbedder embedder(a.token_dim, 0);

  const auto report = evaluate_corpus(records, cfg, embedder, *encoder);
  const json jr = report;
  if (!a.output.empty()) {
    binio::write_atomically(a.output, [&](std::ostream& out) { out << jr.dump(2) << '\n'; });
  }
  const auto table = format_report_table(report);
  if (!a.table.empty()) {
    binio::write_atomically(a.table, [&](std::ostream& out) { out << table; });
  } else {
    std::cerr << table;
  }
  return {{"means", report.means}, {"records", report.per_example.size()}, {"skipped", report.skipped}};
}

struct CalibrateArgs {
  std::string pairs, scores, output, encoder, embeddings;
  std::size_t encoder_dim = 256;
  std::size_t token_dim = 64;
};

json cmd_calibrate_beta(const CalibrateArgs& a) {
  require(a.pairs.empty() != a.scores.empty(), ErrorKind::config, "give exactly one of --pairs or --scores");
  Calibration cal;
  if (!a.scores.empty()) {
    std::vector<PairScores> scores;
    for (const auto& j : read_jsonl(a.scores)) {
      scores.push_back({j.at("bert").get<double>(), j.at("sbert").get<double>(), j.at("bleu").get<double>()});
    }
    cal = calibrate_beta_from_scores(scores);
  } else {
    std::vector<std::pair<std::string, std::string>> pairs;
    for (const auto& j : read_jsonl(a.pairs)) {
      const auto source = j.at("source").get<std::string>();
      for (const auto& r : j.at("references").get<std::vector<std::string>>()) pairs.emplace_back(source, r);
    }
    auto encoder = encoder_from_flags(a.encoder, a.embeddings);
    if (!encoder) encoder = std::make_unique<HashedBagEncoder>(a.encoder_dim, 0);
    cal = calibrate_beta(pairs, HashedTokenEmbedder(a.token_dim, 0), *encoder);
  }
  const json out = cal;
  if (!a.output.empty()) {
    binio::write_atomically(a.output, [&](std::ostream& o) { o << out.dump(2) << '\n'; });
  }
  return out;
}

void print_error(std::string_view kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"smclm: semantic-conditioned language model toolkit"};
  app.require_subcommand(0, 1);
  Common common;
  bool show_defaults = false;
  app.set_config("--config", "", "TOML/INI file of option defaults");
  app.add_option("--seed", common.seed, "random seed")->capture_default_str();
  app.add_flag("--strict", common.strict, "fail on malformed records instead of skipping");
  app.add_flag("--show-defaults", show_defaults, "print the default hyperparameters as JSON and exit");

  BuildCorpusArgs bc;
  auto* build = app.add_subcommand("build-corpus", "sample a deduplicated sentence corpus from document sources");
  build->add_option("--sources", bc.sources, "JSONL {domain, name, documents}")->required();
  build->add_option("--target", bc.target, "number of sentences")->required();
  build->add_option("--min-chars", bc.min_chars)->capture_default_str();
  build->add_option("--output,-o", bc.output)->required();
  build->add_option("--manifest", bc.manifest, "per-domain counts JSON");

  SplitArgs sp;
  auto* split = app.add_subcommand("split-dataset", "split paraphrase groups into train/valid/test");
  split->add_option("--groups", sp.groups, "JSONL {id, sentences}")->required();
  split->add_option("--output-dir,-o", sp.output_dir)->required();
  split->add_option("--train-ratio", sp.train)->capture_default_str();
  split->add_option("--valid-ratio", sp.valid)->capture_default_str();
  split->add_option("--test-ratio", sp.test)->capture_default_str();

  VocabArgs vb;
  auto* vocab = app.add_subcommand("build-vocab", "build a word vocabulary from a corpus");
  vocab->add_option("--corpus", vb.corpus)->required();
  vocab->add_option("--min-freq", vb.min_freq)->capture_default_str();
  vocab->add_option("--output,-o", vb.output)->required();

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "train a CLM or SMCLM model");
  trn->add_option("--corpus", tr.corpus)->required();
  trn->add_option("--valid", tr.valid);
  trn->add_option("--vocab", tr.vocab);
  trn->add_option("--init", tr.init, "checkpoint to continue from");
  trn->add_option("--output,-o", tr.output)->required();
  trn->add_option("--log", tr.log, "JSONL step log");
  trn->add_option("--mode", tr.mode)->check(CLI::IsMember({"clm", "smclm"}))->capture_default_str();
  trn->add_option("--encoder", tr.encoder, "encoder spec JSON");
  trn->add_option("--embeddings", tr.embeddings, "SMEM embedding file");
  trn->add_option("--embed-dim", tr.embed_dim);
  trn->add_option("--layers", tr.model.layer_count)->capture_default_str();
  trn->add_option("--heads", tr.model.head_count)->capture_default_str();
  trn->add_option("--ff-dim", tr.model.ff_dim)->capture_default_str();
  trn->add_option("--max-positions", tr.model.max_positions)->capture_default_str();
  trn->add_option("--lr", tr.train.learning_rate)->capture_default_str();
  trn->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
  trn->add_option("--weight-decay", tr.train.weight_decay)->capture_default_str();
  trn->add_option("--epochs", tr.train.epochs)->capture_default_str();
  trn->add_option("--warmup", tr.train.warmup_steps)->capture_default_str();
  trn->add_option("--clip", tr.clip, "global gradient-norm clip (0 = off)");

  GenerateArgs ge;
  auto* gen = app.add_subcommand("generate", "generate paraphrase candidates with diverse beam search");
  gen->add_option("--checkpoint", ge.checkpoint)->required();
  gen->add_option("--input", ge.input, "one source sentence per line")->required();
  gen->add_option("--output,-o", ge.output)->required();
  gen->add_option("--encoder", ge.encoder);
  gen->add_option("--embeddings", ge.embeddings);
  gen->add_option("--beams", ge.decode.beam_count)->capture_default_str();
  gen->add_option("--groups", ge.decode.group_count)->capture_default_str();
  gen->add_option("--diversity", ge.decode.diversity_penalty)->capture_default_str();
  gen->add_option("--no-repeat-ngram", ge.decode.no_repeat_ngram, "0 disables")->capture_default_str();
  gen->add_option("--length-exponent", ge.decode.length_exponent)->capture_default_str();
  gen->add_option("--max-length", ge.max_length);
  gen->add_option("--beta", ge.beta)->capture_default_str();
  gen->add_flag("--skip-errors", ge.skip_errors, "log and skip failing sources instead of aborting");

  EvaluateArgs ev;
  auto* eval = app.add_subcommand("evaluate", "compute the metric report for test records and candidates");
  eval->add_option("--records", ev.records, "JSONL {source, references[, candidates, best]}")->required();
  eval->add_option("--candidates", ev.candidates, "CandidateSet JSONL aligned with --records");
  eval->add_flag("--copy-input", ev.copy_input, "use the source as the only candidate");
  eval->add_flag("--reference-max", ev.reference_max, "max instead of mean over references");
  eval->add_option("--beta", ev.beta)->capture_default_str();
  eval->add_option("--fluency", ev.fluency, "JSONL {sentence, score in [0,1]}");
  eval->add_option("--encoder", ev.encoder);
  eval->add_option("--embeddings", ev.embeddings);
  eval->add_option("--encoder-dim", ev.encoder_dim)->capture_default_str();
  eval->add_option("--token-dim", ev.token_dim)->capture_default_str();
  eval->add_option("--output,-o", ev.output, "report JSON");
  eval->add_option("--table", ev.table, "text table (default: stderr)");

  CalibrateArgs ca;
  auto* cal = app.add_subcommand("calibrate-beta", "choose beta from reference paraphrase pairs");
  cal->add_option("--pairs", ca.pairs, "JSONL {source, references}");
  cal->add_option("--scores", ca.scores, "JSONL {bert, sbert, bleu} precomputed per pair");
  cal->add_option("--encoder", ca.encoder);
  cal->add_option("--embeddings", ca.embeddings);
  cal->add_option("--encoder-dim", ca.encoder_dim)->capture_default_str();
  cal->add_option("--token-dim", ca.token_dim)->capture_default_str();
  cal->add_option("--output,-o", ca.output);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 1;
  }

  try {
    json summary;
    if (show_defaults) {
      summary = defaults_json();
    } else if (*build) {
      summary = cmd_build_corpus(bc, common);
    } else if (*split) {
      summary = cmd_split_dataset(sp, common);
    } else if (*vocab) {
      summary = cmd_build_vocab(vb);
    } else if (*trn) {
      summary = cmd_train(tr, common);
    } else if (*gen) {
      summary = cmd_generate(ge);
    } else if (*eval) {
      summary = cmd_evaluate(ev, common);
    } else if (*cal) {
      summary = cmd_calibrate_beta(ca);
    } else {
      std::cout << app.help();
      return 1;
    }
    std::cout << summary.dump() << std::endl;
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what());
    return e.kind() == ErrorKind::non_finite ? 2 : 1;
  } catch (const json::exception& e) {
    print_error("format", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
