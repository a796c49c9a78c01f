#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "smclm/checkpoint.hpp"
#include "smclm/decoding.hpp"
#include "smclm/encoder.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / "smclm_cli_tests" / info->name();
    fs::remove_all(dir);
    fs::create_directories(dir);
  }

  CliResult run(const std::string& args) const {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string("SMCLM_THREADS=1 \"") + SMCLM_CLI_PATH + "\" " + args + " >\"" + out.string() +
                            "\" 2>\"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string p(const std::string& name) const { return "\"" + (dir / name).string() + "\""; }
  static std::string toy(const std::string& name) { return "\"" + (fs::path(SMCLM_TOY_DIR) / name).string() + "\""; }

  void write(const std::string& name, const std::string& content) const {
    std::ofstream(dir / name, std::ios::binary) << content;
  }

  /// Splits the toy groups and trains a small SMCLM checkpoint on train.txt.
  void train_small() {
    ASSERT_EQ(run("split-dataset --groups " + toy("groups.jsonl") + " -o " + p("split")).code, 0);
    ASSERT_EQ(run("build-vocab --corpus " + p("split/train.txt") + " -o " + p("vocab.txt")).code, 0);
    write("encoder.json", R"({"kind": "hashed-bag", "dim": 16})");
    const auto r = run("train --corpus " + p("split/train.txt") + " --valid " + p("split/valid.txt") +
                       " --vocab " + p("vocab.txt") +
                       " -o " + p("model.smck") + " --mode smclm --encoder " + p("encoder.json") +
                       " --layers 1 --heads 2 --ff-dim 32 --max-positions 24 --epochs 1 --batch-size 16 --lr 1e-3"
                       " --warmup 2 --log " + p("log.jsonl"));
    ASSERT_EQ(r.code, 0) << r.err;
  }
};

}  // namespace

TEST_F(Cli, ShowDefaults) {
  const auto r = run("--show-defaults");
  ASSERT_EQ(r.code, 0);
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("selection_beta"), 2.0);
  EXPECT_EQ(j.at("generate").at("beam_count"), 5);
}

TEST_F(Cli, BuildCorpusReachesTarget) {
  const auto r = run("build-corpus --sources " + toy("sources.jsonl") + " --target 100 -o " + p("corpus.txt") +
                     " --manifest " + p("manifest.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(dir / "corpus.txt").size(), 100u);
  const auto summary = json::parse(r.out);
  EXPECT_EQ(summary.at("admitted"), 100);
  EXPECT_EQ(summary.at("shortfall"), 0);
  const auto manifest = json::parse(slurp(dir / "manifest.json"));
  EXPECT_TRUE(manifest.contains("domains"));
}

TEST_F(Cli, BuildCorpusIsDeterministic) {
  ASSERT_EQ(run("--seed 4 build-corpus --sources " + toy("sources.jsonl") + " --target 50 -o " + p("a.txt")).code, 0);
  ASSERT_EQ(run("--seed 4 build-corpus --sources " + toy("sources.jsonl") + " --target 50 -o " + p("b.txt")).code, 0);
  EXPECT_EQ(slurp(dir / "a.txt"), slurp(dir / "b.txt"));
}

TEST_F(Cli, SplitDatasetRatios) {
  const auto r = run("split-dataset --groups " + toy("groups.jsonl") + " -o " + p("split"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(dir / "split/train.groups.jsonl").size(), 80u);
  EXPECT_EQ(lines_of(dir / "split/valid.groups.jsonl").size(), 5u);
  EXPECT_EQ(lines_of(dir / "split/test.groups.jsonl").size(), 15u);
  EXPECT_EQ(lines_of(dir / "split/test.pairs.jsonl").size(), 15u);
  const auto pair = json::parse(lines_of(dir / "split/test.pairs.jsonl").front());
  EXPECT_EQ(pair.at("references").size(), 2u);
}

TEST_F(Cli, MissingInputNamesPath) {
  const auto r = run("build-vocab --corpus " + p("nope.txt") + " -o " + p("v.txt"));
  EXPECT_EQ(r.code, 1);
  const auto e = json::parse(r.err);
  EXPECT_NE(e.at("message").get<std::string>().find("nope.txt"), std::string::npos);
}

TEST_F(Cli, UsageErrorExitsOne) {
  const auto r = run("generate --beams");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "usage");
}

TEST_F(Cli, SmclmWithoutEncoderIsConfigError) {
  write("c.txt", "a b c\n");
  const auto r = run("train --corpus " + p("c.txt") + " -o " + p("m.smck") + " --mode smclm");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "config");
  EXPECT_FALSE(fs::exists(dir / "m.smck"));
}

TEST_F(Cli, GenerateDefaultsAndGreedyEquivalence) {
  train_small();
  EXPECT_FALSE(lines_of(dir / "log.jsonl").empty());
  const auto sources = lines_of(dir / "split/test.txt");
  ASSERT_FALSE(sources.empty());
  auto r = run("generate --checkpoint " + p("model.smck") + " --input " + p("split/test.txt") + " -o " + p("c.jsonl"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sets = lines_of(dir / "c.jsonl");
  ASSERT_EQ(sets.size(), sources.size());
  for (const auto& line : sets) {
    const auto j = json::parse(line);
    EXPECT_EQ(j.at("candidates").size(), 5u);
    EXPECT_EQ(j.at("scores").size(), 5u);
  }

  r = run("generate --checkpoint " + p("model.smck") + " --input " + p("split/test.txt") + " -o " + p("g.jsonl") +
          " --beams 1 --groups 1 --diversity 0 --no-repeat-ngram 0");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ck = smclm::load_checkpoint(dir / "model.smck");
  const auto encoder = smclm::make_encoder(ck.encoder_spec);
  const auto greedy_sets = lines_of(dir / "g.jsonl");
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const smclm::ModelScorer<float> scorer(ck.params, encoder->encode(sources[i]));
    const auto g = smclm::greedy_decode(scorer, 24);
    const auto text = smclm::detokenize(std::span<const smclm::TokenId>(g.ids), ck.vocab);
    EXPECT_EQ(json::parse(greedy_sets[i]).at("candidates").at(0), text) << sources[i];
  }
}

TEST_F(Cli, GenerateIsDeterministicAndHandlesEmptyInput) {
  train_small();
  ASSERT_EQ(run("generate --checkpoint " + p("model.smck") + " --input " + p("split/valid.txt") + " -o " + p("a.jsonl")).code, 0);
  ASSERT_EQ(run("generate --checkpoint " + p("model.smck") + " --input " + p("split/valid.txt") + " -o " + p("b.jsonl")).code, 0);
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  write("empty.txt", "");
  const auto r = run("generate --checkpoint " + p("model.smck") + " --input " + p("empty.txt") + " -o " + p("e.jsonl"));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(lines_of(dir / "e.jsonl").empty());
}

TEST_F(Cli, GenerateEncoderDimMismatch) {
  train_small();
  write("wide.json", R"({"kind": "hashed-bag", "dim": 32})");
  const auto r = run("generate --checkpoint " + p("model.smck") + " --input " + p("split/valid.txt") + " -o " +
                     p("x.jsonl") + " --encoder " + p("wide.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(json::parse(r.err).at("error"), "dimension");
}

TEST_F(Cli, EvaluateCopyInputScoresZeroIbleu) {
  ASSERT_EQ(run("split-dataset --groups " + toy("groups.jsonl") + " -o " + p("split")).code, 0);
  const auto r = run("evaluate --records " + p("split/test.pairs.jsonl") + " --copy-input --table " + p("t.txt"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto means = json::parse(r.out).at("means");
  EXPECT_EQ(means.at("oriBLEU"), 100.0);
  EXPECT_EQ(means.at("BERT-iBLEU"), 0.0);
  EXPECT_EQ(means.at("SBERT-iBLEU"), 0.0);
  EXPECT_NE(slurp(dir / "t.txt").find("SBERT-iBLEU"), std::string::npos);
}

TEST_F(Cli, CalibrateFromScores) {
  write("scores.jsonl",
        "{\"bert\": 80.39, \"sbert\": 75.49, \"bleu\": 38.9}\n{\"bert\": 84.39, \"sbert\": 81.49, \"bleu\": 42.9}\n");
  const auto r = run("calibrate-beta --scores " + p("scores.jsonl"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("beta"), 2);
}
