#include <gtest/gtest.h>

#include "smclm/pipeline.hpp"

using namespace smclm;

namespace {

const HashedBagEncoder kEncoder(16);

struct Setup {
  Vocabulary vocab;
  ModelParams<float> model;
};

Setup make_setup() {
  const std::vector<std::string> corpus{"the cat sat on the mat", "a dog ran in the park", "birds fly over hills"};
  auto vocab = build_vocabulary(corpus, 1);
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.embed_dim = 16;
  c.layer_count = 1;
  c.head_count = 2;
  c.ff_dim = 32;
  c.max_positions = 16;
  c.seed = 5;
  return {std::move(vocab), ModelParams<float>::initialize(c)};
}

BeamSearchConfig decode_cfg() {
  BeamSearchConfig d;
  d.max_length = 8;
  return d;
}

}  // namespace

TEST(ArgmaxFirst, TiesGoToLowestIndex) {
  EXPECT_EQ(argmax_first({0.5, 0.7, 0.7}), 1u);
  EXPECT_EQ(argmax_first({0.0, 0.0}), 0u);
  EXPECT_THROW(argmax_first({}), Error);
}

TEST(SelectBest, IdenticalCandidatesPickFirst) {
  const auto set = select_best("the cat sat", {"a cat sat down", "a cat sat down", "a cat sat down"}, 2.0, kEncoder);
  EXPECT_EQ(set.best, 0u);
  EXPECT_EQ(set.scores[0], set.scores[2]);
}

TEST(SelectBest, CopyOfSourceScoresZero) {
  const auto set = select_best("the cat sat", {"the cat sat", "a cat sat down"}, 2.0, kEncoder);
  EXPECT_EQ(set.scores[0], 0.0);
  EXPECT_EQ(set.best, 1u);
}

TEST(SelectBest, EmptyCandidateScoresZeroAndEmptyListIsError) {
  const auto set = select_best("the cat sat", {"", "..."}, 2.0, kEncoder);
  EXPECT_EQ(set.scores, (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(select_best("x", {}, 2.0, kEncoder), Error);
}

TEST(SelectBest, ScoresAreSbertIbleu) {
  const std::vector<std::string> c{"the dog sat", "cats sat on mats"};
  const auto set = select_best("the cat sat", c, 2.0, kEncoder);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_DOUBLE_EQ(set.scores[i], sbert_ibleu("the cat sat", c[i], 2.0, kEncoder));
}

TEST(Paraphrase, ProducesBeamCountCandidatesDeterministically) {
  const auto s = make_setup();
  const auto a = paraphrase("the cat sat", s.model, s.vocab, kEncoder, decode_cfg(), {});
  const auto b = paraphrase("the cat sat", s.model, s.vocab, kEncoder, decode_cfg(), {});
  EXPECT_EQ(a.candidates.size(), 5u);
  EXPECT_EQ(a.candidates, b.candidates);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.best, argmax_first(a.scores));
}

TEST(Paraphrase, EncoderDimMismatchIsError) {
  const auto s = make_setup();
  const HashedBagEncoder wrong(8);
  try {
    paraphrase("the cat sat", s.model, s.vocab, wrong, decode_cfg(), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
}

TEST(Paraphrase, CandidateSetJsonRoundTrip) {
  const auto s = make_setup();
  const auto a = paraphrase("a dog ran", s.model, s.vocab, kEncoder, decode_cfg(), {});
  const nlohmann::json j = a;
  const auto b = j.get<CandidateSet>();
  EXPECT_EQ(b.source, a.source);
  EXPECT_EQ(b.candidates, a.candidates);
  EXPECT_EQ(b.scores, a.scores);
  EXPECT_EQ(b.best, a.best);
}

TEST(ParaphraseBatch, EmptyBatch) {
  const auto s = make_setup();
  const auto r = paraphrase_batch({}, s.model, s.vocab, kEncoder, decode_cfg(), {});
  EXPECT_TRUE(r.sets.empty());
  EXPECT_TRUE(r.errors.empty());
}

TEST(ParaphraseBatch, MatchesSingleCallsInOrder) {
  const auto s = make_setup();
  const std::vector<std::string> sources{"the cat sat", "a dog ran", "birds fly", "the park", "hills"};
  BatchOptions opt;
  opt.threads = 3;
  const auto r = paraphrase_batch(sources, s.model, s.vocab, kEncoder, decode_cfg(), {}, opt);
  ASSERT_EQ(r.sets.size(), sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto one = paraphrase(sources[i], s.model, s.vocab, kEncoder, decode_cfg(), {});
    EXPECT_EQ(r.sets[i].source, sources[i]);
    EXPECT_EQ(r.sets[i].candidates, one.candidates);
    EXPECT_EQ(r.sets[i].best, one.best);
  }
}

TEST(ParaphraseBatch, FailFastOrCollect) {
  const auto s = make_setup();
  auto d = decode_cfg();
  d.max_length = 20;  // exceeds the position budget
  EXPECT_THROW(paraphrase_batch({"a"}, s.model, s.vocab, kEncoder, d, {}), Error);
  BatchOptions keep;
  keep.fail_fast = false;
  const auto r = paraphrase_batch({"a", "b"}, s.model, s.vocab, kEncoder, d, {}, keep);
  EXPECT_TRUE(r.sets.empty());
  ASSERT_EQ(r.errors.size(), 2u);
  EXPECT_EQ(r.errors[1].first, 1u);
}
