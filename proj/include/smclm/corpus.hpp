#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "smclm/error.hpp"
#include "smclm/hashing.hpp"
#include "smclm/text.hpp"

namespace smclm {

/// Unbiased index in [0, n) drawn by rejection from a 64-bit Mersenne Twister,
/// so results do not depend on the standard library's distributions.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  require(n > 0, ErrorKind::input, "uniform_index: empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

template <typename Vec>
void seeded_shuffle(Vec& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    using std::swap;
    swap(items[i - 1], items[uniform_index(rng, i)]);
  }
}

inline std::size_t utf8_length(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

// ---------------------------------------------------------------------------
// sentence splitting and language filtering

using SentenceSplitter = std::function<std::vector<std::string>(std::string_view)>;
using LanguageFilter = std::function<bool(std::string_view)>;

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline bool opens_sentence(std::string_view rest) {
  if (rest.empty()) return false;
  const auto c = static_cast<unsigned char>(rest[0]);
  if (std::isupper(c) || c == '"' || c == '\'') return true;
  // curly double/single opening quotes
  return rest.starts_with("\xE2\x80\x9C") || rest.starts_with("\xE2\x80\x98");
}

inline const std::set<std::string>& abbreviations() {
  static const std::set<std::string> kAbbrev{"mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc",
                                             "inc", "ltd", "co", "corp", "e.g", "i.e", "u.s", "no", "fig", "gen",
                                             "gov", "sen", "rep", "mt", "jan", "feb", "aug", "sept", "oct", "nov",
                                             "dec"};
  return kAbbrev;
}

}  // namespace detail

/// Splits on runs of . ? ! followed by whitespace and an uppercase letter or
/// opening quote, unless the word before a single period is a known
/// abbreviation.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0, i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c != '.' && c != '?' && c != '!') {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < text.size() && (text[end] == '.' || text[end] == '?' || text[end] == '!')) ++end;
    std::size_t next = end;
    while (next < text.size() && std::isspace(static_cast<unsigned char>(text[next]))) ++next;
    const bool has_space = next > end;
    bool boundary = has_space && detail::opens_sentence(text.substr(next));
    if (boundary && c == '.' && end == i + 1) {
      std::size_t w = i;
      while (w > start && !std::isspace(static_cast<unsigned char>(text[w - 1]))) --w;
      std::string word(text.substr(w, i - w));
      std::transform(word.begin(), word.end(), word.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (detail::abbreviations().count(word) || (word.size() == 1 && std::isalpha(static_cast<unsigned char>(word[0])))) {
        boundary = false;
      }
    }
    if (boundary) {
      auto s = detail::trim(text.substr(start, end - start));
      if (!s.empty()) out.push_back(std::move(s));
      start = next;
    }
    i = end;
  }
  auto tail = detail::trim(text.substr(start));
  if (!tail.empty()) out.push_back(std::move(tail));
  return out;
}

/// Passes text whose non-space characters are at least `min_ratio` ASCII
/// letters, digits or punctuation.
inline bool ascii_ratio_filter(std::string_view text, double min_ratio = 0.9) {
  std::size_t total = 0, ascii = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if ((c & 0xC0) == 0x80) continue;  // continuation byte
    if (c < 0x80 && std::isspace(c)) continue;
    ++total;
    if (c < 0x80 && (std::isalnum(c) || std::ispunct(c))) ++ascii;
  }
  return total > 0 && static_cast<double>(ascii) >= min_ratio * static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// corpus building

struct DocumentSource {
  std::string domain;
  std::string name;
  std::vector<std::string> documents;
};

struct DomainCounts {
  std::size_t admitted = 0;
  std::size_t rejected_short = 0;
  std::size_t rejected_language = 0;
  std::size_t rejected_empty = 0;
  std::size_t duplicates = 0;
};

inline void to_json(nlohmann::json& j, const DomainCounts& c) {
  j = {{"admitted", c.admitted},
       {"rejected_short", c.rejected_short},
       {"rejected_language", c.rejected_language},
       {"rejected_empty", c.rejected_empty},
       {"duplicates", c.duplicates}};
}

struct CorpusManifest {
  std::size_t target = 0;
  std::size_t admitted = 0;
  std::size_t shortfall = 0;
  bool exhausted = false;
  std::map<std::string, DomainCounts> domains;
};

inline void to_json(nlohmann::json& j, const CorpusManifest& m) {
  j = {{"target", m.target},       {"admitted", m.admitted}, {"shortfall", m.shortfall},
       {"exhausted", m.exhausted}, {"domains", m.domains}};
}

struct CorpusOptions {
  std::size_t target_count = 0;
  std::uint64_t seed = 0;
  std::size_t min_chars = 10;
  LanguageFilter language_filter = [](std::string_view t) { return ascii_ratio_filter(t); };
  SentenceSplitter splitter = split_sentences;
};

struct Corpus {
  std::vector<std::string> sentences;
  CorpusManifest manifest;
};

/// Random walk over domains -> sources -> documents. Each document is drawn
/// at most once (sources are consumed in a seeded random order). A document is
/// rejected if shorter than min_chars code points or refused by the language
/// filter; otherwise one of its sentences is drawn and admitted if its 64-bit
/// FNV-1a content hash is new. Stops at target_count or when every source is
/// exhausted, recording the shortfall.
inline Corpus build_corpus(const std::vector<DocumentSource>& sources, const CorpusOptions& opt) {
  require(!sources.empty(), ErrorKind::config, "build_corpus: no sources");
  require(opt.target_count >= 1, ErrorKind::config, "build_corpus: target_count must be >= 1");

  std::mt19937_64 rng(opt.seed);
  std::vector<std::string> domains;
  std::map<std::string, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (!by_domain.count(sources[i].domain)) domains.push_back(sources[i].domain);
    by_domain[sources[i].domain].push_back(i);
  }
  std::vector<std::vector<std::size_t>> order(sources.size());
  std::vector<std::size_t> cursor(sources.size(), 0);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    order[i].resize(sources[i].documents.size());
    std::iota(order[i].begin(), order[i].end(), 0);
    seeded_shuffle(order[i], rng);
  }

  Corpus corpus;
  auto& manifest = corpus.manifest;
  manifest.target = opt.target_count;
  for (const auto& d : domains) manifest.domains[d];
  std::unordered_set<std::uint64_t> seen;

  while (corpus.sentences.size() < opt.target_count) {
    std::vector<std::string> live_domains;
    for (const auto& d : domains) {
      for (auto s : by_domain[d]) {
        if (cursor[s] < order[s].size()) {
          live_domains.push_back(d);
          break;
        }
      }
    }
    if (live_domains.empty()) {
      manifest.exhausted = true;
      break;
    }
    const auto& domain = live_domains[uniform_index(rng, live_domains.size())];
    std::vector<std::size_t> live_sources;
    for (auto s : by_domain[domain]) {
      if (cursor[s] < order[s].size()) live_sources.push_back(s);
    }
    const auto src = live_sources[uniform_index(rng, live_sources.size())];
    const std::string& doc = sources[src].documents[order[src][cursor[src]++]];
    auto& counts = manifest.domains[domain];

    if (utf8_length(doc) < opt.min_chars) {
      ++counts.rejected_short;
      continue;
    }
    if (opt.language_filter && !opt.language_filter(doc)) {
      ++counts.rejected_language;
      continue;
    }
    const auto sentences = opt.splitter(doc);
    if (sentences.empty()) {
      ++counts.rejected_empty;
      continue;
    }
    const auto& sentence = sentences[uniform_index(rng, sentences.size())];
    if (!seen.insert(fnv1a64(sentence)).second) {
      ++counts.duplicates;
      continue;
    }
    corpus.sentences.push_back(sentence);
    ++counts.admitted;
  }
  manifest.admitted = corpus.sentences.size();
  manifest.shortfall = opt.target_count - manifest.admitted;
  return corpus;
}

// ---------------------------------------------------------------------------
// paraphrase groups and dataset splits

struct ParaphraseGroup {
  std::string id;
  std::vector<std::string> sentences;
};

inline void to_json(nlohmann::json& j, const ParaphraseGroup& g) { j = {{"id", g.id}, {"sentences", g.sentences}}; }

inline void from_json(const nlohmann::json& j, ParaphraseGroup& g) {
  j.at("id").get_to(g.id);
  j.at("sentences").get_to(g.sentences);
}

enum class Split : std::size_t { train = 0, valid = 1, test = 2 };
inline constexpr std::array<std::string_view, 3> kSplitNames{"train", "valid", "test"};

struct SplitRatios {
  double train = 0.80, valid = 0.05, test = 0.15;
};

struct SplitPlan {
  SplitRatios ratios;
  std::uint64_t seed = 0;
  std::map<std::string, Split> assignment;
  std::array<std::vector<std::string>, 3> groups;  // group ids per split, in assignment order
};

/// Largest-remainder apportionment of `n` items to the given weights; ties
/// in the fractional part go to the earlier split.
inline std::array<std::size_t, 3> apportion(std::size_t n, const SplitRatios& r) {
  const std::array<double, 3> w{r.train, r.valid, r.test};
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double quota = static_cast<double>(n) * w[i];
    sizes[i] = static_cast<std::size_t>(std::floor(quota + 1e-9));
    frac[i] = quota - static_cast<double>(sizes[i]);
    used += sizes[i];
  }
  std::array<std::size_t, 3> idx{0, 1, 2};
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++sizes[idx[k % 3]];
  return sizes;
}

/// Assigns whole groups to train/valid/test. Groups are shuffled by seed and
/// cut at largest-remainder sizes. Groups that share a sentence are kept
/// together so the three splits never share a sentence.
inline SplitPlan split_groups(const std::vector<ParaphraseGroup>& groups, const SplitRatios& ratios,
                              std::uint64_t seed) {
  require(ratios.train > 0 && ratios.valid > 0 && ratios.test > 0, ErrorKind::config,
          "split_groups: ratios must be positive");
  require(std::abs(ratios.train + ratios.valid + ratios.test - 1.0) < 1e-9, ErrorKind::config,
          "split_groups: ratios must sum to 1");
  require(groups.size() >= 3, ErrorKind::input,
          "split_groups: need at least 3 groups, got " + std::to_string(groups.size()));

  // union-find over groups sharing any sentence
  std::vector<std::size_t> parent(groups.size());
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::unordered_map<std::string, std::size_t> owner;
  std::set<std::string> ids;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    require(ids.insert(groups[g].id).second, ErrorKind::input, "split_groups: duplicate group id " + groups[g].id);
    for (const auto& s : groups[g].sentences) {
      auto [it, inserted] = owner.emplace(s, g);
      if (!inserted) parent[find(g)] = find(it->second);
    }
  }
  std::map<std::size_t, std::vector<std::size_t>> components;
  for (std::size_t g = 0; g < groups.size(); ++g) components[find(g)].push_back(g);
  std::vector<std::vector<std::size_t>> units;
  for (auto& [_, members] : components) units.push_back(std::move(members));

  std::mt19937_64 rng(seed);
  seeded_shuffle(units, rng);

  const auto sizes = apportion(groups.size(), ratios);
  SplitPlan plan;
  plan.ratios = ratios;
  plan.seed = seed;
  std::size_t split = 0;
  std::array<std::size_t, 3> filled{};
  for (const auto& unit : units) {
    while (split < 2 && filled[split] >= sizes[split]) ++split;
    for (auto g : unit) {
      plan.assignment[groups[g].id] = static_cast<Split>(split);
      plan.groups[split].push_back(groups[g].id);
    }
    filled[split] += unit.size();
  }
  return plan;
}

/// Picks one member (by seed and group id) as the source and pairs it with every other member.
inline std::vector<std::pair<std::string, std::string>> make_supervised_pairs(const ParaphraseGroup& group,
                                                                              std::uint64_t seed) {
  require(group.sentences.size() >= 2, ErrorKind::input,
          "make_supervised_pairs: group '" + group.id + "' has fewer than 2 members");
  std::mt19937_64 rng(splitmix64(seed ^ fnv1a64(group.id)));
  const std::size_t source = uniform_index(rng, group.sentences.size());
  std::vector<std::pair<std::string, std::string>> pairs;
  for (std::size_t i = 0; i < group.sentences.size(); ++i) {
    if (i != source) pairs.emplace_back(group.sentences[source], group.sentences[i]);
  }
  return pairs;
}

/// One sentence per line for each split: all members of its groups in plan
/// order, first occurrence kept.
inline std::array<std::vector<std::string>, 3> flatten_unsupervised(const SplitPlan& plan,
                                                                    const std::vector<ParaphraseGroup>& groups) {
  std::unordered_map<std::string, const ParaphraseGroup*> by_id;
  for (const auto& g : groups) by_id[g.id] = &g;
  std::array<std::vector<std::string>, 3> out;
  for (std::size_t s = 0; s < 3; ++s) {
    std::unordered_set<std::string> seen;
    for (const auto& id : plan.groups[s]) {
      auto it = by_id.find(id);
      require(it != by_id.end(), ErrorKind::input, "flatten_unsupervised: unknown group id " + id);
      for (const auto& sentence : it->second->sentences) {
        if (seen.insert(sentence).second) out[s].push_back(sentence);
      }
    }
  }
  return out;
}

}  // namespace smclm
