#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "smclm/error.hpp"
#include "smclm/text.hpp"

namespace smclm {

/// Anything that can score the next token given the generated prefix.
template <typename S>
concept NextTokenScorer = requires(const S& s, std::span<const TokenId> prefix) {
  { s.vocab_size() } -> std::convertible_to<std::size_t>;
  { s.eos_id() } -> std::convertible_to<TokenId>;
  { s.next_logprobs(prefix) } -> std::convertible_to<std::vector<double>>;
};

/// Defaults: 5 beams in 5 groups, diversity penalty 0.6, no repeated bigrams.
struct BeamSearchConfig {
  std::size_t beam_count = 5;
  std::size_t group_count = 5;
  double diversity_penalty = 0.6;
  std::size_t no_repeat_ngram = 2;  // 0 disables the constraint
  std::size_t max_length = 32;      // generated tokens, EOS included
  double length_exponent = 1.0;

  void validate() const {
    require(beam_count >= 1 && group_count >= 1, ErrorKind::config, "beam search: beams and groups must be >= 1");
    require(beam_count % group_count == 0, ErrorKind::config,
            "beam search: beam_count " + std::to_string(beam_count) + " not divisible by group_count " +
                std::to_string(group_count));
    require(diversity_penalty >= 0.0, ErrorKind::config, "beam search: diversity_penalty must be >= 0");
    require(max_length >= 1, ErrorKind::config, "beam search: max_length must be >= 1");
  }

  std::size_t beams_per_group() const noexcept { return beam_count / group_count; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BeamSearchConfig, beam_count, group_count, diversity_penalty,
                                                no_repeat_ngram, max_length, length_exponent)

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated tokens, including a final EOS when present
  double logprob = 0.0;         // true model log-probability, no diversity penalty
  bool finished = false;
  std::size_t group = 0;

  double score(double length_exponent) const {
    return logprob / std::pow(static_cast<double>(std::max<std::size_t>(tokens.size(), 1)), length_exponent);
  }

  /// Tokens without the trailing EOS.
  std::vector<TokenId> body(TokenId eos) const {
    std::vector<TokenId> b = tokens;
    if (!b.empty() && b.back() == eos) b.pop_back();
    return b;
  }
};

/// True if appending `next` would repeat an n-gram already present in `tokens`.
inline bool repeats_ngram(std::span<const TokenId> tokens, TokenId next, std::size_t n) {
  if (n == 0 || tokens.size() + 1 < n) return false;
  if (n == 1) return std::find(tokens.begin(), tokens.end(), next) != tokens.end();
  const auto tail = tokens.subspan(tokens.size() - (n - 1));
  for (std::size_t start = 0; start + n <= tokens.size(); ++start) {
    if (tokens[start + n - 1] != next) continue;
    if (std::equal(tail.begin(), tail.end(), tokens.begin() + static_cast<std::ptrdiff_t>(start))) return true;
  }
  return false;
}

namespace detail {

template <NextTokenScorer S>
void check_length_budget(const S& scorer, std::size_t max_length) {
  if constexpr (requires { scorer.max_generated(); }) {
    require(max_length <= scorer.max_generated(), ErrorKind::length,
            "decoder: max_length " + std::to_string(max_length) + " exceeds the model's position budget " +
                std::to_string(scorer.max_generated()));
  }
}

}  // namespace detail

/// Argmax decoding (ties to the lowest id); stops at EOS or max_length.
/// Returns the body without EOS.
template <NextTokenScorer S>
TokenSequence greedy_decode(const S& scorer, std::size_t max_length) {
  require(max_length >= 1, ErrorKind::config, "greedy_decode: max_length must be >= 1");
  detail::check_length_budget(scorer, max_length);
  TokenSequence out;
  for (std::size_t step = 0; step < max_length; ++step) {
    const auto lp = scorer.next_logprobs(std::span<const TokenId>(out.ids));
    const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    if (best == scorer.eos_id()) break;
    out.ids.push_back(best);
  }
  return out;
}

/// Group-wise beam search with a Hamming diversity penalty.
///
/// Each group holds beam_count/group_count slots. At every timestep groups
/// extend in order; a candidate token's selection score in group g is its
/// cumulative log-prob minus diversity_penalty times the number of times the
/// same token was already picked by groups 0..g-1 at this timestep. The
/// penalty steers selection only; stored log-probs stay exact. Tokens that
/// would repeat an n-gram are masked. A hypothesis that selects EOS (or
/// reaches max_length) is finished and keeps its slot, so every group ends
/// with exactly beams_per_group hypotheses unless masking starves it.
/// Results are ordered by group, then by logprob / length^alpha.
template <NextTokenScorer S>
std::vector<Hypothesis> diverse_beam_search(const S& scorer, const BeamSearchConfig& cfg) {
  cfg.validate();
  detail::check_length_budget(scorer, cfg.max_length);
  const std::size_t groups = cfg.group_count, per_group = cfg.beams_per_group();
  const std::size_t vocab = scorer.vocab_size();
  const TokenId eos = scorer.eos_id();

  struct GroupState {
    std::vector<Hypothesis> active;
    std::vector<Hypothesis> finished;
    bool done = false;
  };
  std::vector<GroupState> state(groups);
  for (std::size_t g = 0; g < groups; ++g) state[g].active.push_back(Hypothesis{{}, 0.0, false, g});

  struct Candidate {
    double selection;
    double logprob;
    std::size_t beam;
    TokenId token;
  };
  std::vector<Candidate> candidates;
  std::vector<std::size_t> picked(vocab, 0);

  for (std::size_t step = 1; step <= cfg.max_length; ++step) {
    std::fill(picked.begin(), picked.end(), 0);
    bool any_active = false;
    for (std::size_t g = 0; g < groups; ++g) {
      auto& gs = state[g];
      if (gs.done) continue;
      candidates.clear();
      for (std::size_t b = 0; b < gs.active.size(); ++b) {
        const auto& hyp = gs.active[b];
        const auto lp = scorer.next_logprobs(std::span<const TokenId>(hyp.tokens));
        require(lp.size() == vocab, ErrorKind::dimension, "decoder: scorer returned wrong vocabulary size");
        for (std::size_t v = 0; v < vocab; ++v) {
          const auto tok = static_cast<TokenId>(v);
          if (!std::isfinite(lp[v])) continue;
          if (repeats_ngram(hyp.tokens, tok, cfg.no_repeat_ngram)) continue;
          const double cum = hyp.logprob + lp[v];
          const double sel = cum - cfg.diversity_penalty * static_cast<double>(picked[v]);
          candidates.push_back({sel, cum, b, tok});
        }
      }
      std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& c) {
        if (a.selection != c.selection) return a.selection > c.selection;
        if (a.token != c.token) return a.token < c.token;
        return a.beam < c.beam;
      });

      const std::size_t slots = per_group - gs.finished.size();
      std::vector<Hypothesis> next;
      for (std::size_t i = 0; i < std::min(slots, candidates.size()); ++i) {
        const auto& c = candidates[i];
        Hypothesis h = gs.active[c.beam];
        h.tokens.push_back(c.token);
        h.logprob = c.logprob;
        ++picked[c.token];
        if (c.token == eos || step == cfg.max_length) {
          h.finished = true;
          gs.finished.push_back(std::move(h));
        } else {
          next.push_back(std::move(h));
        }
      }
      gs.active = std::move(next);
      if (gs.active.empty()) gs.done = true;
      any_active = any_active || !gs.done;
    }
    if (!any_active) break;
  }

  std::vector<Hypothesis> out;
  out.reserve(cfg.beam_count);
  for (auto& gs : state) {
    std::stable_sort(gs.finished.begin(), gs.finished.end(), [&](const Hypothesis& a, const Hypothesis& b) {
      const double sa = a.score(cfg.length_exponent), sb = b.score(cfg.length_exponent);
      if (sa != sb) return sa > sb;
      return a.tokens.size() < b.tokens.size();
    });
    for (auto& h : gs.finished) out.push_back(std::move(h));
  }
  return out;
}

}  // namespace smclm
