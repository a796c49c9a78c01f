#pragma once

#include <atomic>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "smclm/decoding.hpp"
#include "smclm/encoder.hpp"
#include "smclm/error.hpp"
#include "smclm/metrics.hpp"
#include "smclm/model.hpp"
#include "smclm/text.hpp"

namespace smclm {

struct SelectionConfig {
  double beta = 2.0;
  /// Encoder for the SBERT side of the selection score; defaults to the generation encoder.
  const SentenceEncoder* encoder = nullptr;
};

/// The k decoded paraphrases of one source and their selection scores.
struct CandidateSet {
  std::string source;
  std::vector<std::string> candidates;
  std::vector<double> scores;
  std::size_t best = 0;
};

inline void to_json(nlohmann::json& j, const CandidateSet& c) {
  j = {{"source", c.source}, {"candidates", c.candidates}, {"scores", c.scores}, {"best", c.best}};
}

inline void from_json(const nlohmann::json& j, CandidateSet& c) {
  j.at("source").get_to(c.source);
  j.at("candidates").get_to(c.candidates);
  c.scores = j.value("scores", std::vector<double>{});
  c.best = j.value("best", std::size_t{0});
}

/// Index of the highest score; ties go to the lowest index.
inline std::size_t argmax_first(const std::vector<double>& scores) {
  require(!scores.empty(), ErrorKind::input, "argmax over an empty score list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

/// Scores candidates by SBERT-iBLEU against the source and marks the best.
/// Duplicates are kept; a candidate that normalizes to nothing scores 0.
inline CandidateSet select_best(std::string source, std::vector<std::string> candidates, double beta,
                                const SentenceEncoder& encoder) {
  require(!candidates.empty(), ErrorKind::input, "paraphrase: decoding produced no candidates");
  CandidateSet set;
  set.source = std::move(source);
  set.candidates = std::move(candidates);
  for (const auto& c : set.candidates) {
    set.scores.push_back(metric_tokens(c).empty() ? 0.0 : sbert_ibleu(set.source, c, beta, encoder));
  }
  set.best = argmax_first(set.scores);
  return set;
}

/// Encode the source, decode candidates with diverse beam search, detokenize,
/// then select by SBERT-iBLEU.
template <typename T>
CandidateSet paraphrase(std::string_view source, const ModelParams<T>& model, const Vocabulary& vocab,
                        const SentenceEncoder& encoder, const BeamSearchConfig& decode, const SelectionConfig& select) {
  require(model.config.vocab_size == vocab.size(), ErrorKind::dimension, "paraphrase: model/vocabulary size mismatch");
  const ModelScorer<T> scorer(model, encoder.encode(source));
  const auto hyps = diverse_beam_search(scorer, decode);
  std::vector<std::string> candidates;
  candidates.reserve(hyps.size());
  for (const auto& h : hyps) {
    const auto body = h.body(Vocabulary::kEos);
    candidates.push_back(detokenize(std::span<const TokenId>(body), vocab));
  }
  return select_best(std::string(source), std::move(candidates), select.beta,
                     select.encoder ? *select.encoder : encoder);
}

struct BatchOptions {
  bool fail_fast = true;
  std::size_t threads = 1;
};

struct BatchResult {
  std::vector<CandidateSet> sets;                          // input order, failures omitted
  std::vector<std::pair<std::size_t, std::string>> errors;  // (source index, message)
};

/// Runs paraphrase() over every source. Workers pull indices from a shared
/// counter; results are written by index so output order matches input order.
template <typename T>
BatchResult paraphrase_batch(const std::vector<std::string>& sources, const ModelParams<T>& model,
                             const Vocabulary& vocab, const SentenceEncoder& encoder, const BeamSearchConfig& decode,
                             const SelectionConfig& select, const BatchOptions& options = {}) {
  std::vector<std::optional<CandidateSet>> slots(sources.size());
  std::vector<std::string> messages(sources.size());
  std::vector<ErrorKind> kinds(sources.size(), ErrorKind::input);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < sources.size(); i = next++) {
      try {
        slots[i] = paraphrase(sources[i], model, vocab, encoder, decode, select);
      } catch (const Error& e) {
        messages[i] = e.what();
        kinds[i] = e.kind();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, sources.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }

  BatchResult result;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (slots[i]) {
      result.sets.push_back(std::move(*slots[i]));
    } else {
      if (options.fail_fast) fail(kinds[i], "source " + std::to_string(i) + ": " + messages[i]);
      result.errors.emplace_back(i, messages[i]);
    }
  }
  return result;
}

}  // namespace smclm
