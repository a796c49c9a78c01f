#pragma once

// Slow, independent reference implementations used only by tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "smclm/decoding.hpp"
#include "smclm/text.hpp"

namespace oracle {

using Words = std::vector<std::string>;

// Occurrences of words[i..i+n) in `in`, by direct comparison at every offset.
inline std::size_t count_occurrences(const Words& in, const Words& words, std::size_t i, std::size_t n) {
  std::size_t c = 0;
  for (std::size_t j = 0; j + n <= in.size(); ++j) {
    bool same = true;
    for (std::size_t k = 0; k < n && same; ++k) same = in[j + k] == words[i + k];
    c += same;
  }
  return c;
}

/// Clipped n-gram precision counts by brute force: for each hypothesis
/// position, count how many earlier positions hold the same n-gram to decide
/// whether it is still within the reference budget.
inline double bleu(const Words& hyp, const std::vector<Words>& refs, std::size_t max_n) {
  if (hyp.empty()) return 0.0;
  std::vector<double> precisions;
  for (std::size_t n = 1; n <= max_n && n <= hyp.size(); ++n) {
    std::size_t matched = 0, total = 0;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
      ++total;
      std::size_t earlier = 0;
      for (std::size_t j = 0; j < i; ++j) {
        bool same = true;
        for (std::size_t k = 0; k < n && same; ++k) same = hyp[j + k] == hyp[i + k];
        earlier += same;
      }
      std::size_t budget = 0;
      for (const auto& r : refs) budget = std::max(budget, count_occurrences(r, hyp, i, n));
      if (earlier < budget) ++matched;
    }
    if (matched == 0) return 0.0;
    precisions.push_back(static_cast<double>(matched) / static_cast<double>(total));
  }
  double prod = 1.0;
  for (double p : precisions) prod *= p;
  const double geo = std::pow(prod, 1.0 / static_cast<double>(precisions.size()));

  // closest reference length, shorter wins ties
  std::size_t best_len = 0;
  long best_diff = std::numeric_limits<long>::max();
  for (const auto& r : refs) {
    const long diff = std::labs(static_cast<long>(r.size()) - static_cast<long>(hyp.size()));
    if (diff < best_diff || (diff == best_diff && r.size() < best_len)) {
      best_diff = diff;
      best_len = r.size();
    }
  }
  const double bp = hyp.size() > best_len ? 1.0 : std::exp(1.0 - double(best_len) / double(hyp.size()));
  return geo * bp;
}

/// LCS by memoized recursion on suffixes.
inline std::size_t lcs(const Words& a, const Words& b) {
  std::vector<std::vector<int>> memo(a.size() + 1, std::vector<int>(b.size() + 1, -1));
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == a.size() || j == b.size()) return 0;
    if (memo[i][j] >= 0) return static_cast<std::size_t>(memo[i][j]);
    const std::size_t r = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    memo[i][j] = static_cast<int>(r);
    return r;
  };
  return go(0, 0);
}

inline double rouge_l(const Words& hyp, const std::vector<Words>& refs) {
  double best = 0.0;
  for (const auto& r : refs) {
    if (hyp.empty() || r.empty()) continue;
    const double l = static_cast<double>(lcs(hyp, r));
    if (l == 0) continue;
    const double p = l / double(hyp.size()), rc = l / double(r.size());
    best = std::max(best, 2 * p * rc / (p + rc));
  }
  return best;
}

struct Beam {
  std::vector<smclm::TokenId> tokens;
  double logprob = 0.0;
};

inline bool has_repeat(const std::vector<smclm::TokenId>& t, std::size_t n) {
  if (n == 0 || t.size() < n) return false;
  for (std::size_t i = 0; i + n <= t.size(); ++i) {
    for (std::size_t j = i + 1; j + n <= t.size(); ++j) {
      if (std::equal(t.begin() + long(i), t.begin() + long(i + n), t.begin() + long(j))) return true;
    }
  }
  return false;
}

/// Textbook beam search of the given width: each step expands every live
/// beam, drops sequences with a repeated n-gram, keeps the best
/// (width - finished) expansions, and retires those ending in EOS or at max_length.
template <typename S>
std::vector<Beam> beam_search(const S& scorer, std::size_t width, std::size_t max_length, std::size_t no_repeat) {
  std::vector<Beam> live{Beam{}}, done;
  for (std::size_t step = 1; step <= max_length && !live.empty(); ++step) {
    std::vector<std::pair<Beam, std::size_t>> pool;  // (expansion, parent index)
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = scorer.next_logprobs(std::span<const smclm::TokenId>(live[b].tokens));
      for (std::size_t v = 0; v < lp.size(); ++v) {
        Beam e = live[b];
        e.tokens.push_back(static_cast<smclm::TokenId>(v));
        e.logprob += lp[v];
        if (!std::isfinite(e.logprob) || has_repeat(e.tokens, no_repeat)) continue;
        pool.emplace_back(std::move(e), b);
      }
    }
    std::stable_sort(pool.begin(), pool.end(), [](const auto& x, const auto& y) {
      if (x.first.logprob != y.first.logprob) return x.first.logprob > y.first.logprob;
      if (x.first.tokens.back() != y.first.tokens.back()) return x.first.tokens.back() < y.first.tokens.back();
      return x.second < y.second;
    });
    std::vector<Beam> next;
    const std::size_t keep = width - done.size();
    for (std::size_t i = 0; i < pool.size() && i < keep; ++i) {
      auto& e = pool[i].first;
      if (e.tokens.back() == scorer.eos_id() || step == max_length) {
        done.push_back(e);
      } else {
        next.push_back(e);
      }
    }
    live = std::move(next);
  }
  std::stable_sort(done.begin(), done.end(), [](const Beam& x, const Beam& y) {
    const double sx = x.logprob / double(x.tokens.size()), sy = y.logprob / double(y.tokens.size());
    if (sx != sy) return sx > sy;
    return x.tokens.size() < y.tokens.size();
  });
  return done;
}

/// Exhaustive oracle for one-beam-per-group diverse search: enumerates every
/// sequence up to max_length with its exact log-prob, then walks the tree
/// step by step, letting each group take the child with the best penalized
/// score (Hamming penalty from earlier groups at the same step).
template <typename S>
std::vector<Beam> enumerate_diverse(const S& scorer, std::size_t groups, double penalty, std::size_t max_length,
                                    std::size_t no_repeat) {
  std::map<std::vector<smclm::TokenId>, double> tree;  // every prefix -> cumulative log-prob
  std::function<void(std::vector<smclm::TokenId>&, double)> expand = [&](std::vector<smclm::TokenId>& prefix,
                                                                         double lp) {
    tree[prefix] = lp;
    if (prefix.size() == max_length || (!prefix.empty() && prefix.back() == scorer.eos_id())) return;
    const auto next = scorer.next_logprobs(std::span<const smclm::TokenId>(prefix));
    for (std::size_t v = 0; v < next.size(); ++v) {
      prefix.push_back(static_cast<smclm::TokenId>(v));
      expand(prefix, lp + next[v]);
      prefix.pop_back();
    }
  };
  std::vector<smclm::TokenId> root;
  expand(root, 0.0);

  std::vector<Beam> paths(groups);
  std::vector<bool> finished(groups, false);
  for (std::size_t step = 1; step <= max_length; ++step) {
    std::map<smclm::TokenId, int> used;
    for (std::size_t g = 0; g < groups; ++g) {
      if (finished[g]) continue;
      double best = -std::numeric_limits<double>::infinity();
      std::vector<smclm::TokenId> choice;
      for (const auto& [seq, lp] : tree) {
        if (seq.size() != step || !std::equal(paths[g].tokens.begin(), paths[g].tokens.end(), seq.begin())) continue;
        if (has_repeat(seq, no_repeat)) continue;
        const double score = lp - penalty * used[seq.back()];
        if (score > best) {  // map order visits lower token ids first
          best = score;
          choice = seq;
        }
      }
      if (choice.empty()) {
        finished[g] = true;
        continue;
      }
      ++used[choice.back()];
      paths[g] = Beam{choice, tree[choice]};
      if (choice.back() == scorer.eos_id() || step == max_length) finished[g] = true;
    }
  }
  return paths;
}

}  // namespace oracle
