#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "smclm/binary_io.hpp"
#include "smclm/error.hpp"
#include "smclm/hashing.hpp"
#include "smclm/text.hpp"

namespace smclm {

/// A unit-norm sentence vector: the conditioning signal injected at position 0.
struct SentenceEmbedding {
  std::vector<float> values;

  std::size_t dim() const noexcept { return values.size(); }
  friend bool operator==(const SentenceEmbedding&, const SentenceEmbedding&) = default;
};

inline double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

/// Scales to unit length. Zero or non-finite input is rejected.
inline std::vector<float> unit_normalize(std::span<const double> raw) {
  double s = 0.0;
  for (double x : raw) {
    require(std::isfinite(x), ErrorKind::non_finite, "embedding has a non-finite entry");
    s += x * x;
  }
  require(s > 0.0, ErrorKind::input, "cannot normalize a zero vector");
  const double inv = 1.0 / std::sqrt(s);
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = static_cast<float>(raw[i] * inv);
  return out;
}

inline double cosine(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), ErrorKind::dimension,
          "cosine: dimension mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine(const SentenceEmbedding& a, const SentenceEmbedding& b) { return cosine(a.values, b.values); }

/// h: sentence -> R^d. Implementations are immutable after construction.
class SentenceEncoder {
 public:
  virtual ~SentenceEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual SentenceEmbedding encode(std::string_view sentence) const = 0;
  /// JSON description sufficient to rebuild the encoder with make_encoder().
  virtual nlohmann::json spec() const = 0;
};

namespace detail {

inline void add_signed_feature(std::vector<double>& acc, std::string_view feature, std::uint64_t seed) {
  const std::uint64_t h = feature_hash(feature, seed);
  const double sign = (h >> 63) ? -1.0 : 1.0;
  acc[h % acc.size()] += sign;
}

inline constexpr std::string_view kEmptyFeature = "\x01<empty>";

}  // namespace detail

/// Signed feature hashing of normalized tokens into R^d. Token overlap implies
/// embedding similarity; word order is ignored.
class HashedBagEncoder final : public SentenceEncoder {
 public:
  explicit HashedBagEncoder(std::size_t dim, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
    require(dim > 0, ErrorKind::config, "hashed-bag encoder: dim must be positive");
  }

  std::size_t dim() const override { return dim_; }

  SentenceEmbedding encode(std::string_view sentence) const override {
    std::vector<double> acc(dim_, 0.0);
    for (const auto& token : metric_tokens(sentence)) detail::add_signed_feature(acc, token, seed_);
    if (std::all_of(acc.begin(), acc.end(), [](double x) { return x == 0.0; })) {
      detail::add_signed_feature(acc, detail::kEmptyFeature, seed_);
    }
    return {unit_normalize(acc)};
  }

  nlohmann::json spec() const override { return {{"kind", "hashed-bag"}, {"dim", dim_}, {"seed", seed_}}; }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// One-hot embedding of a sentence's cluster id. Cluster membership is looked
/// up first by exact normalized sentence, then by keyword vote (most keyword
/// hits wins, ties to the lower cluster id), then the optional fallback.
class ClusterOracleEncoder final : public SentenceEncoder {
 public:
  struct Options {
    std::size_t dim = 0;
    std::map<std::string, std::size_t> sentences;  // normalized sentence -> cluster
    std::map<std::string, std::size_t> keywords;   // normalized token -> cluster
    std::optional<std::size_t> unknown_cluster;
  };

  explicit ClusterOracleEncoder(Options options) : opt_(std::move(options)) {
    require(opt_.dim > 0, ErrorKind::config, "cluster-oracle encoder: dim must be positive");
    auto check = [&](std::size_t c) {
      require(c < opt_.dim, ErrorKind::dimension,
              "cluster-oracle encoder: cluster id " + std::to_string(c) + " >= dim " + std::to_string(opt_.dim));
    };
    std::map<std::string, std::size_t> normalized;
    for (auto& [s, c] : opt_.sentences) {
      check(c);
      normalized[normalize(s)] = c;
    }
    opt_.sentences = std::move(normalized);
    for (auto& [_, c] : opt_.keywords) check(c);
    if (opt_.unknown_cluster) check(*opt_.unknown_cluster);
  }

  std::size_t dim() const override { return opt_.dim; }

  std::size_t cluster_of(std::string_view sentence) const {
    const std::string norm = normalize(sentence);
    if (auto it = opt_.sentences.find(norm); it != opt_.sentences.end()) return it->second;
    std::map<std::size_t, std::size_t> votes;
    for (const auto& token : split_whitespace(norm)) {
      if (auto it = opt_.keywords.find(token); it != opt_.keywords.end()) ++votes[it->second];
    }
    if (!votes.empty()) {
      return std::max_element(votes.begin(), votes.end(),
                              [](const auto& a, const auto& b) { return a.second < b.second; })
          ->first;
    }
    if (opt_.unknown_cluster) return *opt_.unknown_cluster;
    fail(ErrorKind::lookup_miss, "cluster-oracle encoder: no cluster for sentence \"" + std::string(sentence) + "\"");
  }

  SentenceEmbedding encode(std::string_view sentence) const override {
    SentenceEmbedding e{std::vector<float>(opt_.dim, 0.0f)};
    e.values[cluster_of(sentence)] = 1.0f;
    return e;
  }

  nlohmann::json spec() const override {
    nlohmann::json j{{"kind", "cluster-oracle"}, {"dim", opt_.dim}};
    j["sentences"] = opt_.sentences;
    j["keywords"] = opt_.keywords;
    if (opt_.unknown_cluster) j["unknown_cluster"] = *opt_.unknown_cluster;
    return j;
  }

 private:
  Options opt_;
};

struct EmbeddingTable {
  std::size_t dim = 0;
  std::vector<std::pair<Sha256Digest, std::vector<float>>> entries;
};

inline Sha256Digest embedding_key(std::string_view sentence) { return sha256(normalize(sentence)); }

// Embedding file: "SMEM", u32 version, u32 count, u32 dim, then per entry a
// 32-byte SHA-256 key and dim float32 values. All integers little-endian.
inline constexpr std::string_view kEmbeddingMagic = "SMEM";
inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline void write_embedding_table(const EmbeddingTable& table, std::ostream& out) {
  out.write(kEmbeddingMagic.data(), 4);
  binio::put_u32(out, kEmbeddingVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(table.entries.size()));
  binio::put_u32(out, static_cast<std::uint32_t>(table.dim));
  for (const auto& [key, values] : table.entries) {
    require(values.size() == table.dim, ErrorKind::dimension, "embedding entry has wrong dimension");
    binio::put_bytes(out, key);
    for (float v : values) binio::put_f32(out, v);
  }
}

inline EmbeddingTable read_embedding_table(std::istream& in) {
  binio::expect_magic(in, kEmbeddingMagic);
  const auto version = binio::get_u32(in, "version");
  require(version == kEmbeddingVersion, ErrorKind::format,
          "unsupported embedding file version " + std::to_string(version));
  const auto count = binio::get_u32(in, "count");
  EmbeddingTable table;
  table.dim = binio::get_u32(in, "dim");
  require(table.dim > 0, ErrorKind::format, "embedding file declares dim 0");
  table.entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sha256Digest key;
    binio::read_exact(in, reinterpret_cast<char*>(key.data()), key.size(), "entry key");
    std::vector<float> values(table.dim);
    for (auto& v : values) v = binio::get_f32(in, "entry values");
    table.entries.emplace_back(key, std::move(values));
  }
  return table;
}

/// Looks sentences up in a precomputed table keyed by SHA-256 of the
/// normalized sentence. Stored vectors are renormalized to unit length.
class FileBackedEncoder final : public SentenceEncoder {
 public:
  explicit FileBackedEncoder(const EmbeddingTable& table, std::string source_path = {})
      : dim_(table.dim), path_(std::move(source_path)) {
    require(dim_ > 0, ErrorKind::config, "file-backed encoder: dim must be positive");
    for (const auto& [key, values] : table.entries) {
      std::vector<double> raw(values.begin(), values.end());
      entries_[to_hex(key)] = unit_normalize(raw);
    }
  }

  static FileBackedEncoder load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open embedding file: " + path);
    return FileBackedEncoder(read_embedding_table(in), path);
  }

  std::size_t dim() const override { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }

  SentenceEmbedding encode(std::string_view sentence) const override {
    auto it = entries_.find(to_hex(embedding_key(sentence)));
    if (it == entries_.end()) {
      fail(ErrorKind::lookup_miss, "file-backed encoder: no embedding for sentence \"" + std::string(sentence) + "\"");
    }
    return {it->second};
  }

  nlohmann::json spec() const override { return {{"kind", "file-backed"}, {"dim", dim_}, {"path", path_}}; }

 private:
  std::size_t dim_;
  std::string path_;
  std::unordered_map<std::string, std::vector<float>> entries_;
};

/// Builds an encoder from its JSON spec: {"kind": "hashed-bag" | "cluster-oracle" | "file-backed", "dim": n, ...}.
inline std::unique_ptr<SentenceEncoder> make_encoder(const nlohmann::json& spec) {
  require(spec.is_object() && spec.contains("kind"), ErrorKind::config, "encoder spec needs a \"kind\"");
  const auto kind = spec.at("kind").get<std::string>();
  const std::size_t dim = spec.value("dim", std::size_t{0});
  if (kind == "hashed-bag") {
    return std::make_unique<HashedBagEncoder>(dim, spec.value("seed", std::uint64_t{0}));
  }
  if (kind == "cluster-oracle") {
    ClusterOracleEncoder::Options opt;
    opt.dim = dim;
    if (spec.contains("sentences")) opt.sentences = spec.at("sentences").get<std::map<std::string, std::size_t>>();
    if (spec.contains("keywords")) opt.keywords = spec.at("keywords").get<std::map<std::string, std::size_t>>();
    if (spec.contains("unknown_cluster")) opt.unknown_cluster = spec.at("unknown_cluster").get<std::size_t>();
    return std::make_unique<ClusterOracleEncoder>(std::move(opt));
  }
  if (kind == "file-backed") {
    require(spec.contains("path"), ErrorKind::config, "file-backed encoder spec needs a \"path\"");
    auto enc = std::make_unique<FileBackedEncoder>(FileBackedEncoder::load(spec.at("path").get<std::string>()));
    require(dim == 0 || dim == enc->dim(), ErrorKind::dimension,
            "file-backed encoder: spec dim " + std::to_string(dim) + " != file dim " + std::to_string(enc->dim()));
    return enc;
  }
  fail(ErrorKind::config, "unknown encoder kind '" + kind + "'");
}

/// Per-token vectors for greedy token matching (BERTScore-style similarity).
class TokenEmbedder {
 public:
  virtual ~TokenEmbedder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<float> embed(std::string_view token) const = 0;
};

/// Hashes the whole token plus its boundary-marked character trigrams, so
/// tokens sharing morphology land near each other.
class HashedTokenEmbedder final : public TokenEmbedder {
 public:
  explicit HashedTokenEmbedder(std::size_t dim = 64, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
    require(dim > 0, ErrorKind::config, "token embedder: dim must be positive");
  }

  std::size_t dim() const override { return dim_; }

  std::vector<float> embed(std::string_view token) const override {
    std::vector<double> acc(dim_, 0.0);
    const std::string whole = "w:" + std::string(token);
    detail::add_signed_feature(acc, whole, seed_);
    const std::string marked = "<" + std::string(token) + ">";
    for (std::size_t i = 0; i + 3 <= marked.size(); ++i) {
      detail::add_signed_feature(acc, "c:" + marked.substr(i, 3), seed_);
    }
    if (std::all_of(acc.begin(), acc.end(), [](double x) { return x == 0.0; })) {
      detail::add_signed_feature(acc, detail::kEmptyFeature, seed_);
    }
    return unit_normalize(acc);
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// Explicit token -> vector table; unknown tokens are an error.
class TableTokenEmbedder final : public TokenEmbedder {
 public:
  TableTokenEmbedder(std::size_t dim, std::map<std::string, std::vector<float>> table)
      : dim_(dim), table_(std::move(table)) {
    for (auto& [token, v] : table_) {
      require(v.size() == dim_, ErrorKind::dimension, "token table entry '" + token + "' has wrong dimension");
    }
  }

  std::size_t dim() const override { return dim_; }

  std::vector<float> embed(std::string_view token) const override {
    auto it = table_.find(std::string(token));
    if (it == table_.end()) fail(ErrorKind::lookup_miss, "token table: no vector for '" + std::string(token) + "'");
    return it->second;
  }

 private:
  std::size_t dim_;
  std::map<std::string, std::vector<float>> table_;
};

}  // namespace smclm
