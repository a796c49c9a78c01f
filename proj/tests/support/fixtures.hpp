#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "smclm/encoder.hpp"
#include "smclm/model.hpp"

namespace fixtures {

struct GradCheckResult {
  std::string worst_tensor;
  double worst_relative_error = 0.0;
  std::size_t checked = 0;
  std::vector<std::size_t> per_class;  // checked scalars per TensorClass
};

/// Redraws every tensor around its init mean (1 for gains, 0 otherwise) with
/// the given spread so layer-norm inputs are O(1) and FD steps are small.
inline void randomize(smclm::ModelParams<double>& p, std::uint64_t seed, double spread = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, spread);
  for (auto* t : p.tensors()) {
    const double mean = t->name.ends_with(".gain") ? 1.0 : 0.0;
    for (auto& x : t->data) x = mean + nd(rng);
  }
}

/// Central finite differences on `per_tensor` random scalars of every tensor.
inline GradCheckResult gradient_check(smclm::ModelParams<double>& p, const smclm::Example& ex, std::size_t per_tensor,
                                      double eps, std::uint64_t seed) {
  const auto [grad, loss] = smclm::backward(p, ex);
  (void)loss;
  GradCheckResult out;
  out.per_class.assign(4, 0);
  std::mt19937_64 rng(seed);
  auto params = p.tensors();
  auto grads = const_cast<smclm::ModelParams<double>&>(grad).tensors();
  std::vector<smclm::TensorClass> classes;
  p.visit([&](smclm::Tensor<double>&, smclm::TensorClass c) { classes.push_back(c); });
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& t = *params[k];
    for (std::size_t s = 0; s < per_tensor; ++s) {
      const std::size_t i = rng() % t.size();
      const double orig = t.data[i];
      t.data[i] = orig + eps;
      const double up = smclm::nll_loss(p, ex).loss;
      t.data[i] = orig - eps;
      const double down = smclm::nll_loss(p, ex).loss;
      t.data[i] = orig;
      const double fd = (up - down) / (2 * eps);
      const double a = grads[k]->data[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      if (rel > out.worst_relative_error) {
        out.worst_relative_error = rel;
        out.worst_tensor = t.name + "[" + std::to_string(i) + "]";
      }
      ++out.checked;
      ++out.per_class[static_cast<std::size_t>(classes[k])];
    }
  }
  return out;
}

/// Synthetic paraphrase clusters: each cluster has its own subject and verb
/// phrase; members vary the filler words, so a sentence's cluster is only
/// recoverable from its content words.
struct ClusterData {
  std::vector<std::vector<std::string>> members;  // per cluster
  std::vector<std::string> keywords;              // one distinctive word per cluster
};

inline ClusterData make_clusters(std::size_t clusters, std::size_t per_cluster) {
  static const std::vector<std::string> subjects{"alice", "bob",   "carol", "dave",  "erin",  "frank", "grace",
                                                 "heidi", "ivan",  "judy",  "mallory", "niaj", "olivia", "peggy",
                                                 "rupert", "sybil", "trent", "victor", "walter", "yolanda"};
  static const std::vector<std::string> objects{"apples", "boats",  "candles", "drums",  "eggs",   "flutes", "grapes",
                                                "hats",   "ink",    "jars",    "kites",  "lamps",  "maps",   "nails",
                                                "oars",   "pens",   "quilts",  "ropes",  "shoes",  "tents"};
  static const std::vector<std::string> frames{"{s} buys {o}",          "{s} purchased {o}",
                                               "{s} is buying {o}",     "{s} got some {o}",
                                               "{s} bought new {o}",    "{s} will buy {o}",
                                               "yesterday {s} bought {o}", "{s} went out for {o}"};
  ClusterData d;
  for (std::size_t c = 0; c < clusters; ++c) {
    const auto& s = subjects[c % subjects.size()];
    const auto& o = objects[(c * 7) % objects.size()];
    d.keywords.push_back(s);
    std::vector<std::string> m;
    for (std::size_t k = 0; k < per_cluster; ++k) {
      std::string f = frames[k % frames.size()];
      f.replace(f.find("{s}"), 3, s);
      f.replace(f.find("{o}"), 3, o);
      m.push_back(f);
    }
    d.members.push_back(std::move(m));
  }
  return d;
}

}  // namespace fixtures
