#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "smclm/encoder.hpp"
#include "smclm/error.hpp"
#include "smclm/model.hpp"
#include "smclm/optimizer.hpp"
#include "smclm/text.hpp"

namespace smclm {

enum class TrainMode { clm, smclm };

NLOHMANN_JSON_SERIALIZE_ENUM(TrainMode, {{TrainMode::clm, "clm"}, {TrainMode::smclm, "smclm"}})

/// Defaults are the SMCLM row of the reference hyperparameter table.
struct TrainConfig {
  double learning_rate = 5e-6;
  std::size_t batch_size = 32;
  double weight_decay = 1e-2;
  std::size_t epochs = 8;
  std::size_t warmup_steps = 2000;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::smclm;
  std::optional<double> gradient_clip_norm;
  std::size_t threads = 1;

  void validate() const {
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::config, "train: learning_rate must be > 0");
    require(batch_size > 0, ErrorKind::config, "train: batch_size must be > 0");
    require(weight_decay >= 0.0, ErrorKind::config, "train: weight_decay must be >= 0");
    require(epochs > 0, ErrorKind::config, "train: epochs must be > 0");
    require(threads > 0, ErrorKind::config, "train: threads must be > 0");
    if (gradient_clip_norm) require(*gradient_clip_norm > 0.0, ErrorKind::config, "train: clip norm must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},  {"warmup_steps", c.warmup_steps}, {"seed", c.seed},
       {"mode", c.mode}};
  j["gradient_clip_norm"] = c.gradient_clip_norm ? nlohmann::json(*c.gradient_clip_norm) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.seed = j.value("seed", c.seed);
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    require(m == "clm" || m == "smclm", ErrorKind::config, "train: mode must be \"clm\" or \"smclm\"");
    c.mode = m == "clm" ? TrainMode::clm : TrainMode::smclm;
  }
  if (j.contains("gradient_clip_norm") && !j.at("gradient_clip_norm").is_null()) {
    c.gradient_clip_norm = j.at("gradient_clip_norm").get<double>();
  }
}

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

inline void to_json(nlohmann::json& j, const StepLog& s) { j = {{"step", s.step}, {"lr", s.lr}, {"loss", s.loss}}; }

struct TrainReport {
  std::vector<double> epoch_losses;
  std::vector<double> valid_losses;
  std::size_t steps = 0;
  std::size_t skipped = 0;  // sequences longer than the position budget
  double wall_seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const TrainReport& r) {
  j = {{"epoch_losses", r.epoch_losses}, {"valid_losses", r.valid_losses}, {"steps", r.steps},
       {"skipped", r.skipped},           {"wall_seconds", r.wall_seconds}};
}

struct PreparedData {
  std::vector<Example> examples;
  std::size_t skipped = 0;
};

/// Tokenizes each sentence and attaches h(s) in SMCLM mode. Sentences whose
/// input would not fit the position budget are skipped and counted.
template <typename Range>
PreparedData prepare_examples(const Range& corpus, const Vocabulary& vocab, const SentenceEncoder* encoder,
                              TrainMode mode, const ModelConfig& model) {
  if (mode == TrainMode::smclm) {
    require(encoder != nullptr, ErrorKind::config, "SMCLM mode needs a sentence encoder");
    require(encoder->dim() == model.embed_dim, ErrorKind::dimension,
            "encoder dim " + std::to_string(encoder->dim()) + " != model embed_dim " +
                std::to_string(model.embed_dim));
  }
  PreparedData out;
  for (const auto& sentence : corpus) {
    auto body = tokenize(sentence, vocab, false).ids;
    if (body.size() + 1 > model.max_positions) {
      ++out.skipped;
      continue;
    }
    Example ex;
    ex.body = std::move(body);
    if (mode == TrainMode::smclm) ex.injection = encoder->encode(sentence).values;
    out.examples.push_back(std::move(ex));
  }
  return out;
}

/// Token-weighted mean loss over `batch` and its gradient, accumulated into
/// `grad` (which must be zeroed by the caller).
template <typename T>
double batch_gradient(const ModelParams<T>& params, std::span<const Example* const> batch, ModelParams<T>& grad,
                      std::size_t threads = 1) {
  std::size_t total_targets = 0;
  for (const auto* ex : batch) total_targets += ex->target_count();
  const double inv_total = 1.0 / static_cast<double>(total_targets);

  auto run_chunk = [&](std::size_t begin, std::size_t end, ModelParams<T>& g) {
    double loss_sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      const double w = static_cast<double>(batch[i]->target_count()) * inv_total;
      const auto r = accumulate_gradient(params, *batch[i], g, static_cast<T>(w));
      loss_sum += r.loss * w;
    }
    return loss_sum;
  };

  threads = std::min(threads, batch.size());
  if (threads <= 1) return run_chunk(0, batch.size(), grad);

  std::vector<ModelParams<T>> partial(threads, ModelParams<T>::zeros(params.config));
  std::vector<double> losses(threads, 0.0);
  {
    std::vector<std::jthread> workers;
    const std::size_t per = (batch.size() + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
      const std::size_t begin = std::min(batch.size(), w * per), end = std::min(batch.size(), begin + per);
      workers.emplace_back([&, w, begin, end] { losses[w] = run_chunk(begin, end, partial[w]); });
    }
  }
  double loss = 0.0;
  auto dst = grad.tensors();
  for (std::size_t w = 0; w < threads; ++w) {
    loss += losses[w];
    auto src = partial[w].tensors();
    for (std::size_t k = 0; k < dst.size(); ++k) {
      for (std::size_t i = 0; i < dst[k]->size(); ++i) dst[k]->data[i] += src[k]->data[i];
    }
  }
  return loss;
}

/// Token-weighted mean NLL over prepared examples; never mutates parameters.
template <typename T>
double mean_nll(const ModelParams<T>& params, std::span<const Example> examples) {
  require(!examples.empty(), ErrorKind::input, "evaluate_nll: no examples to evaluate");
  double total = 0.0;
  std::size_t targets = 0;
  for (const auto& ex : examples) {
    const auto r = nll_loss(params, ex);
    total += r.loss * static_cast<double>(ex.target_count());
    targets += ex.target_count();
  }
  return total / static_cast<double>(targets);
}

template <typename T, typename Range>
double evaluate_nll(const ModelParams<T>& params, const Vocabulary& vocab, const SentenceEncoder* encoder,
                    const Range& corpus, TrainMode mode) {
  auto data = prepare_examples(corpus, vocab, encoder, mode, params.config);
  require(!data.examples.empty(), ErrorKind::input, "evaluate_nll: empty evaluation corpus");
  return mean_nll(params, std::span<const Example>(data.examples));
}

using StepCallback = std::function<void(const StepLog&)>;

inline std::size_t total_train_steps(std::size_t examples, const TrainConfig& cfg) {
  return cfg.epochs * ((examples + cfg.batch_size - 1) / cfg.batch_size);
}

/// CLM / SMCLM training with AdamW and linear warmup/decay. Parameters are
/// updated in place once per batch.
template <typename T, typename Range>
TrainReport train(ModelParams<T>& params, const Vocabulary& vocab, const SentenceEncoder* encoder,
                  const Range& corpus, const Range& valid, const TrainConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  require(params.config.vocab_size == vocab.size(), ErrorKind::dimension,
          "model vocab_size " + std::to_string(params.config.vocab_size) + " != vocabulary size " +
              std::to_string(vocab.size()));
  const auto start = std::chrono::steady_clock::now();

  auto train_data = prepare_examples(corpus, vocab, encoder, cfg.mode, params.config);
  require(!train_data.examples.empty(), ErrorKind::input, "train: training corpus is empty");
  std::optional<PreparedData> valid_data;
  if (std::begin(valid) != std::end(valid)) {
    valid_data = prepare_examples(valid, vocab, encoder, cfg.mode, params.config);
  }

  const std::size_t n = train_data.examples.size();
  const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const LinearWarmupSchedule schedule(cfg.learning_rate, cfg.warmup_steps, total_train_steps(n, cfg));
  AdamW<T> optimizer(params, AdamWConfig{.weight_decay = cfg.weight_decay});

  TrainReport report;
  report.skipped = train_data.skipped;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::vector<const Example*> batch;
  auto grad = ModelParams<T>::zeros(params.config);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_targets = 0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      batch.clear();
      std::size_t targets = 0;
      for (std::size_t i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(&train_data.examples[order[i]]);
        targets += batch.back()->target_count();
      }
      grad.visit([](Tensor<T>& t, TensorClass) { std::fill(t.data.begin(), t.data.end(), T(0)); });
      const double loss = batch_gradient(params, std::span<const Example* const>(batch), grad, cfg.threads);
      if (!std::isfinite(loss)) {
        fail(ErrorKind::non_finite, "non-finite loss at step " + std::to_string(report.steps) + " (epoch " +
                                        std::to_string(epoch) + ", batch " + std::to_string(b) + ")");
      }
      if (cfg.gradient_clip_norm) clip_global_norm(grad, *cfg.gradient_clip_norm);
      const double lr = schedule(report.steps);
      optimizer.step(params, grad, lr);
      if (on_step) on_step(StepLog{report.steps, lr, loss});
      ++report.steps;
      epoch_loss += loss * static_cast<double>(targets);
      epoch_targets += targets;
    }
    report.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_targets));
    if (valid_data && !valid_data->examples.empty()) {
      report.valid_losses.push_back(mean_nll(params, std::span<const Example>(valid_data->examples)));
    }
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace smclm
