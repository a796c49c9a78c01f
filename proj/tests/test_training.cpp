#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "smclm/training.hpp"

using namespace smclm;

namespace {

ModelConfig small(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 16;
  c.layer_count = 1;
  c.head_count = 2;
  c.ff_dim = 32;
  c.max_positions = 16;
  c.seed = 1;
  return c;
}

TrainConfig fast(std::size_t epochs, std::size_t batch = 1) {
  TrainConfig t;
  t.learning_rate = 1e-2;
  t.batch_size = batch;
  t.epochs = epochs;
  t.warmup_steps = 10;
  t.weight_decay = 0.0;
  t.mode = TrainMode::clm;
  return t;
}

const std::vector<std::string> kNone;

}  // namespace

TEST(Schedule, WarmupMidpointIsHalf) {
  const LinearWarmupSchedule s(5e-6, 2000, 10000);
  EXPECT_EQ(s(1000), 5e-6 / 2);
  EXPECT_EQ(s(0), 0.0);
  EXPECT_EQ(s(2000), 5e-6);
  EXPECT_NEAR(s(6000), 2.5e-6, 1e-18);
  EXPECT_EQ(s(10000), 0.0);
}

TEST(Schedule, WarmupBeyondTotalRejected) { EXPECT_THROW(LinearWarmupSchedule(1e-3, 11, 10), Error); }

TEST(Optimizer, DecayGrouping) {
  EXPECT_TRUE(decays("token_embedding"));
  EXPECT_TRUE(decays("blocks.0.attn.qkv.weight"));
  EXPECT_FALSE(decays("blocks.0.attn.qkv.bias"));
  EXPECT_FALSE(decays("blocks.1.ln2.gain"));
  EXPECT_FALSE(decays("final_ln.bias"));
}

TEST(Training, MemorizesOneSentence) {
  const std::vector<std::string> corpus{"the quick brown fox jumps over the lazy dog"};
  const auto vocab = build_vocabulary(corpus, 1);
  auto p = ModelParams<float>::initialize(small(vocab.size()));
  const double before = evaluate_nll(p, vocab, nullptr, corpus, TrainMode::clm);
  auto cfg = fast(200);
  const auto report = train(p, vocab, nullptr, corpus, kNone, cfg);
  EXPECT_EQ(report.steps, 200u);
  const double after = evaluate_nll(p, vocab, nullptr, corpus, TrainMode::clm);
  EXPECT_LT(after, 0.1);
  EXPECT_LT(after, before);
}

TEST(Training, ReproducibleWithSeed) {
  const std::vector<std::string> corpus{"a b c", "b c d", "c d e", "d e a"};
  const auto vocab = build_vocabulary(corpus, 1);
  auto cfg = fast(5, 2);
  auto p1 = ModelParams<float>::initialize(small(vocab.size()));
  auto p2 = p1;
  const auto r1 = train(p1, vocab, nullptr, corpus, corpus, cfg);
  const auto r2 = train(p2, vocab, nullptr, corpus, corpus, cfg);
  EXPECT_EQ(r1.epoch_losses, r2.epoch_losses);
  EXPECT_EQ(r1.valid_losses, r2.valid_losses);
}

TEST(Training, WeightDecayShrinksNorm) {
  const std::vector<std::string> corpus{"one two three four", "four three two one"};
  const auto vocab = build_vocabulary(corpus, 1);
  auto cfg = fast(50, 2);
  cfg.learning_rate = 5e-2;
  auto plain = ModelParams<float>::initialize(small(vocab.size()));
  auto decayed = plain;
  train(plain, vocab, nullptr, corpus, kNone, cfg);
  cfg.weight_decay = 1e-2;
  train(decayed, vocab, nullptr, corpus, kNone, cfg);
  EXPECT_LT(decayed.squared_norm(), plain.squared_norm());
}

TEST(Training, EvaluateEqualsBatchLoss) {
  const std::vector<std::string> corpus{"a b", "b c d", "c"};
  const auto vocab = build_vocabulary(corpus, 1);
  const auto p = ModelParams<float>::initialize(small(vocab.size()));
  const auto data = prepare_examples(corpus, vocab, nullptr, TrainMode::clm, p.config);
  std::vector<const Example*> batch;
  for (const auto& e : data.examples) batch.push_back(&e);
  auto grad = ModelParams<float>::zeros(p.config);
  const double batch_loss = batch_gradient(p, std::span<const Example* const>(batch), grad);
  EXPECT_NEAR(evaluate_nll(p, vocab, nullptr, corpus, TrainMode::clm), batch_loss, 1e-6);
}

TEST(Training, ThreadedBatchMatchesSerial) {
  const std::vector<std::string> corpus{"a b", "b c d", "c", "d a b c", "a a"};
  const auto vocab = build_vocabulary(corpus, 1);
  const auto p = ModelParams<double>::initialize(small(vocab.size()));
  const auto data = prepare_examples(corpus, vocab, nullptr, TrainMode::clm, p.config);
  std::vector<const Example*> batch;
  for (const auto& e : data.examples) batch.push_back(&e);
  auto g1 = ModelParams<double>::zeros(p.config), g3 = ModelParams<double>::zeros(p.config);
  const double l1 = batch_gradient(p, std::span<const Example* const>(batch), g1, 1);
  const double l3 = batch_gradient(p, std::span<const Example* const>(batch), g3, 3);
  EXPECT_NEAR(l1, l3, 1e-12);
  const auto a = g1.tensors(), b = g3.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k]->size(); ++i) ASSERT_NEAR(a[k]->data[i], b[k]->data[i], 1e-12);
  }
}

TEST(Training, EmptyValidationIsError) {
  const std::vector<std::string> corpus{"a b c"};
  const auto vocab = build_vocabulary(corpus, 1);
  const auto p = ModelParams<float>::initialize(small(vocab.size()));
  EXPECT_THROW(evaluate_nll(p, vocab, nullptr, kNone, TrainMode::clm), Error);
}

TEST(Training, SmclmNeedsEncoderWithMatchingDim) {
  const std::vector<std::string> corpus{"a b c"};
  const auto vocab = build_vocabulary(corpus, 1);
  auto p = ModelParams<float>::initialize(small(vocab.size()));
  auto cfg = fast(1);
  cfg.warmup_steps = 0;
  cfg.mode = TrainMode::smclm;
  EXPECT_THROW(train(p, vocab, nullptr, corpus, kNone, cfg), Error);
  const HashedBagEncoder wrong(8);
  try {
    train(p, vocab, &wrong, corpus, kNone, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
  }
  const HashedBagEncoder right(16);
  EXPECT_NO_THROW(train(p, vocab, &right, corpus, kNone, cfg));
}

TEST(Training, LongSequencesSkippedAndCounted) {
  std::string longest;
  for (int i = 0; i < 20; ++i) longest += "w ";
  const std::vector<std::string> corpus{"a b", longest};
  const auto vocab = build_vocabulary(corpus, 1);
  auto p = ModelParams<float>::initialize(small(vocab.size()));
  auto cfg = fast(1);
  cfg.warmup_steps = 0;
  const auto report = train(p, vocab, nullptr, corpus, kNone, cfg);
  EXPECT_EQ(report.skipped, 1u);
}

TEST(Training, NonFiniteLossAborts) {
  const std::vector<std::string> corpus{"a b c"};
  const auto vocab = build_vocabulary(corpus, 1);
  auto p = ModelParams<float>::initialize(small(vocab.size()));
  p.token_embedding.data[5] = std::numeric_limits<float>::quiet_NaN();
  try {
    auto cfg = fast(1);
    cfg.warmup_steps = 0;
    train(p, vocab, nullptr, corpus, kNone, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::non_finite);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Training, StepCallbackSeesSchedule) {
  const std::vector<std::string> corpus{"a b c"};
  const auto vocab = build_vocabulary(corpus, 1);
  auto p = ModelParams<float>::initialize(small(vocab.size()));
  auto cfg = fast(20);
  std::vector<StepLog> logs;
  train(p, vocab, nullptr, corpus, kNone, cfg, [&](const StepLog& s) { logs.push_back(s); });
  ASSERT_EQ(logs.size(), 20u);
  EXPECT_EQ(logs[5].lr, cfg.learning_rate / 2);
  EXPECT_EQ(logs[10].lr, cfg.learning_rate);
}
