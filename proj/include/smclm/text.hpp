#pragma once

#include <unicode/locid.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "smclm/error.hpp"

namespace smclm {

using TokenId = std::uint32_t;

namespace detail {

enum class PunctuationMode { drop, separate };

// Lowercases, then either drops or isolates punctuation code points, and
// collapses whitespace runs into single spaces.
inline std::string fold_text(std::string_view sentence, PunctuationMode mode) {
  icu::UnicodeString text = icu::UnicodeString::fromUTF8(
      icu::StringPiece(sentence.data(), static_cast<std::int32_t>(sentence.size())));
  text.toLower(icu::Locale::getRoot());

  icu::UnicodeString out;
  bool pending_space = false;
  auto emit = [&](UChar32 c) {
    if (pending_space && !out.isEmpty()) out.append(static_cast<UChar32>(' '));
    pending_space = false;
    out.append(c);
  };
  for (std::int32_t i = 0; i < text.length(); i = text.moveIndex32(i, 1)) {
    const UChar32 c = text.char32At(i);
    if (u_isUWhiteSpace(c) || u_isspace(c)) {
      pending_space = true;
    } else if (u_ispunct(c)) {
      if (mode == PunctuationMode::separate) {
        pending_space = true;
        emit(c);
        pending_space = true;
      }
    } else {
      emit(c);
    }
  }
  std::string utf8;
  out.toUTF8String(utf8);
  return utf8;
}

}  // namespace detail

/// Lower-cases, removes every code point in a Unicode punctuation category,
/// collapses whitespace runs and trims. Applied before every lexical metric.
inline std::string normalize(std::string_view sentence) {
  return detail::fold_text(sentence, detail::PunctuationMode::drop);
}

/// Lower-cased text with every punctuation mark split off as its own word.
/// This is what the model tokenizer sees, and what detokenize reproduces.
inline std::string surface_form(std::string_view sentence) {
  return detail::fold_text(sentence, detail::PunctuationMode::separate);
}

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

/// Tokens used by BLEU, ROUGE and the similarity metrics.
inline std::vector<std::string> metric_tokens(std::string_view sentence) {
  return split_whitespace(normalize(sentence));
}

inline std::string join(std::span<const std::string> words, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr TokenId kPad = 3;
  static constexpr std::size_t kSpecialCount = 4;
  static constexpr std::size_t kMinSize = 5;

  static constexpr std::string_view kBosToken = "<bos>";
  static constexpr std::string_view kEosToken = "<eos>";
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kPadToken = "<pad>";

  Vocabulary() = default;

  /// `tokens` must start with the four special markers in id order.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    require(tokens_.size() >= kMinSize, ErrorKind::config,
            "vocabulary needs at least " + std::to_string(kMinSize) + " entries, got " +
                std::to_string(tokens_.size()));
    require(tokens_[kBos] == kBosToken && tokens_[kEos] == kEosToken && tokens_[kUnk] == kUnkToken &&
                tokens_[kPad] == kPadToken,
            ErrorKind::format, "vocabulary must begin with <bos>, <eos>, <unk>, <pad>");
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      require(!tokens_[i].empty(), ErrorKind::format, "vocabulary entry " + std::to_string(i) + " is empty");
      auto [_, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      require(inserted, ErrorKind::format, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  const std::string& token(TokenId id) const {
    require(id < tokens_.size(), ErrorKind::input, "token id " + std::to_string(id) + " out of range");
    return tokens_[id];
  }

  static bool is_special(TokenId id) noexcept { return id < kSpecialCount; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const noexcept { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Orders tokens by descending frequency, ties broken lexicographically, after
/// the four specials. Tokens below `min_freq` are left out.
template <typename Range>
Vocabulary build_vocabulary(const Range& corpus, std::size_t min_freq) {
  std::map<std::string, std::size_t> counts;
  std::size_t sentences = 0;
  for (const auto& sentence : corpus) {
    ++sentences;
    for (auto& word : split_whitespace(surface_form(sentence))) ++counts[word];
  }
  require(sentences > 0, ErrorKind::config, "build_vocabulary: corpus is empty");

  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [word, n] : counts) {
    if (n >= min_freq && word != Vocabulary::kBosToken && word != Vocabulary::kEosToken &&
        word != Vocabulary::kUnkToken && word != Vocabulary::kPadToken) {
      kept.emplace_back(word, n);
    }
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> tokens{std::string(Vocabulary::kBosToken), std::string(Vocabulary::kEosToken),
                                  std::string(Vocabulary::kUnkToken), std::string(Vocabulary::kPadToken)};
  for (auto& [word, _] : kept) tokens.push_back(word);
  if (tokens.size() < Vocabulary::kMinSize) {
    fail(ErrorKind::config, "build_vocabulary: no token reaches min_freq=" + std::to_string(min_freq));
  }
  return Vocabulary(std::move(tokens));
}

/// Word-level tokenizer interface; a subword implementation can be swapped in.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual TokenSequence tokenize(std::string_view sentence, bool add_markers) const = 0;
  virtual std::string detokenize(std::span<const TokenId> ids) const = 0;
  virtual std::size_t vocab_size() const = 0;
};

inline TokenSequence tokenize(std::string_view sentence, const Vocabulary& vocab, bool add_markers) {
  TokenSequence seq;
  if (add_markers) seq.ids.push_back(Vocabulary::kBos);
  for (auto& word : split_whitespace(surface_form(sentence))) seq.ids.push_back(vocab.id(word));
  if (add_markers) seq.ids.push_back(Vocabulary::kEos);
  return seq;
}

/// Joins body tokens with single spaces. Special markers other than <unk> are skipped.
inline std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (Vocabulary::is_special(id) && id != Vocabulary::kUnk) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

class WordTokenizer final : public Tokenizer {
 public:
  explicit WordTokenizer(Vocabulary vocab) : vocab_(std::move(vocab)) {}

  TokenSequence tokenize(std::string_view sentence, bool add_markers) const override {
    return smclm::tokenize(sentence, vocab_, add_markers);
  }
  std::string detokenize(std::span<const TokenId> ids) const override { return smclm::detokenize(ids, vocab_); }
  std::size_t vocab_size() const override { return vocab_.size(); }

  const Vocabulary& vocabulary() const noexcept { return vocab_; }

 private:
  Vocabulary vocab_;
};

inline void write_vocabulary(const Vocabulary& vocab, std::ostream& out) {
  for (const auto& token : vocab.tokens()) out << token << '\n';
}

inline Vocabulary read_vocabulary(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

inline Vocabulary read_vocabulary(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open vocabulary file: " + path);
  return read_vocabulary(in);
}

}  // namespace smclm
