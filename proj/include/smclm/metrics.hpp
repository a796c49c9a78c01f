#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "smclm/encoder.hpp"
#include "smclm/error.hpp"
#include "smclm/hashing.hpp"
#include "smclm/text.hpp"

namespace smclm {

// Scores are computed on [0, 1] and reported on [0, 100].
inline constexpr double kReportScale = 100.0;

namespace detail {

using Words = std::vector<std::string>;

inline std::map<std::vector<std::string_view>, std::size_t> ngram_counts(const Words& words, std::size_t n) {
  std::map<std::vector<std::string_view>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::vector<std::string_view> gram(words.begin() + static_cast<std::ptrdiff_t>(i),
                                       words.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++counts[gram];
  }
  return counts;
}

inline double bleu_words(const Words& hyp, const std::vector<Words>& refs, std::size_t max_n) {
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    if (hyp.size() < n) break;  // no n-grams of this order to score
    const auto hyp_counts = ngram_counts(hyp, n);
    std::map<std::vector<std::string_view>, std::size_t> max_ref;
    for (const auto& ref : refs) {
      for (const auto& [gram, count] : ngram_counts(ref, n)) {
        auto& m = max_ref[gram];
        m = std::max(m, count);
      }
    }
    std::size_t matches = 0;
    for (const auto& [gram, count] : hyp_counts) {
      if (auto it = max_ref.find(gram); it != max_ref.end()) matches += std::min(count, it->second);
    }
    if (matches == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matches) / static_cast<double>(hyp.size() - n + 1));
    ++orders;
  }
  const double precision = std::exp(log_sum / static_cast<double>(orders));

  std::size_t closest = refs.front().size();
  for (const auto& ref : refs) {
    const auto diff = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
    if (diff(ref.size()) < diff(closest) || (diff(ref.size()) == diff(closest) && ref.size() < closest)) {
      closest = ref.size();
    }
  }
  const double c = static_cast<double>(hyp.size()), r = static_cast<double>(closest);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return precision * bp;
}

inline std::size_t lcs_length(const Words& a, const Words& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::vector<Words> tokenize_all(const std::vector<std::string>& texts) {
  std::vector<Words> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(metric_tokens(t));
  return out;
}

}  // namespace detail

/// Sentence-level BLEU on normalized words: geometric mean of clipped n-gram
/// precisions for the orders the hypothesis is long enough to have, times the
/// brevity penalty against the closest reference length. No smoothing: any
/// order with zero matches gives 0.
inline double bleu(std::string_view hypothesis, const std::vector<std::string>& references, std::size_t max_n = 3) {
  require(!references.empty(), ErrorKind::input, "bleu: empty reference list");
  require(max_n >= 1, ErrorKind::config, "bleu: max_n must be >= 1");
  return kReportScale * detail::bleu_words(metric_tokens(hypothesis), detail::tokenize_all(references), max_n);
}

/// Mean BLEU-3 of each candidate against the source.
inline double ori_bleu(std::string_view source, const std::vector<std::string>& candidates) {
  require(!candidates.empty(), ErrorKind::input, "ori_bleu: no candidates");
  const std::vector<std::string> refs{std::string(source)};
  double sum = 0.0;
  for (const auto& c : candidates) sum += bleu(c, refs, 3);
  return sum / static_cast<double>(candidates.size());
}

/// Mean over candidates of BLEU-3 with that candidate as hypothesis and all the others as references.
inline double self_bleu(const std::vector<std::string>& candidates) {
  require(candidates.size() >= 2, ErrorKind::input, "self_bleu: needs at least 2 candidates");
  const auto words = detail::tokenize_all(candidates);
  double sum = 0.0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::vector<detail::Words> rest;
    for (std::size_t j = 0; j < words.size(); ++j) {
      if (j != i) rest.push_back(words[j]);
    }
    sum += detail::bleu_words(words[i], rest, 3);
  }
  return kReportScale * sum / static_cast<double>(words.size());
}

/// ROUGE-L F1 (equal precision/recall weight), max over references.
/// An empty hypothesis scores 0.
inline double rouge_l(std::string_view hypothesis, const std::vector<std::string>& references) {
  require(!references.empty(), ErrorKind::input, "rouge_l: empty reference list");
  const auto hyp = metric_tokens(hypothesis);
  if (hyp.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref_text : references) {
    const auto ref = metric_tokens(ref_text);
    if (ref.empty()) continue;
    const auto lcs = static_cast<double>(detail::lcs_length(hyp, ref));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(hyp.size()), r = lcs / static_cast<double>(ref.size());
    best = std::max(best, 2.0 * p * r / (p + r));
  }
  return kReportScale * best;
}

/// BERTScore-style F1: every token is greedily matched to its most similar
/// token on the other side. Precision and recall are clamped at 0.
inline double token_match_similarity(std::string_view a, std::string_view b, const TokenEmbedder& embedder) {
  const auto wa = metric_tokens(a), wb = metric_tokens(b);
  require(!wa.empty() && !wb.empty(), ErrorKind::input, "token_match_similarity: empty side after normalization");
  std::vector<std::vector<float>> ea, eb;
  for (const auto& w : wa) ea.push_back(embedder.embed(w));
  for (const auto& w : wb) eb.push_back(embedder.embed(w));
  std::vector<double> best_a(ea.size(), -1.0), best_b(eb.size(), -1.0);
  for (std::size_t i = 0; i < ea.size(); ++i) {
    for (std::size_t j = 0; j < eb.size(); ++j) {
      const double c = wa[i] == wb[j] ? 1.0 : cosine(ea[i], eb[j]);
      best_a[i] = std::max(best_a[i], c);
      best_b[j] = std::max(best_b[j], c);
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double precision = std::max(0.0, mean(best_a)), recall = std::max(0.0, mean(best_b));
  if (precision + recall == 0.0) return 0.0;
  return kReportScale * 2.0 * precision * recall / (precision + recall);
}

/// 100 * max(0, cos(h(a), h(b))).
inline double sentence_cosine_similarity(std::string_view a, std::string_view b, const SentenceEncoder& encoder) {
  const auto ea = encoder.encode(a), eb = encoder.encode(b);
  if (ea == eb) return kReportScale;  // exact, without float rounding in the norms
  return kReportScale * std::max(0.0, cosine(ea, eb));
}

/// Weighted harmonic mean of the semantic score (weight beta) and 1 - bBLEU.
/// Both inputs on [0, 1]; either limit (bBLEU = 1 or semantic = 0) gives 0.
inline double ibleu_combine(double semantic, double b_bleu, double beta) {
  require(beta > 0.0 && std::isfinite(beta), ErrorKind::config, "ibleu_combine: beta must be > 0");
  require(semantic >= 0.0 && semantic <= 1.0, ErrorKind::input, "ibleu_combine: semantic score outside [0, 1]");
  require(b_bleu >= 0.0 && b_bleu <= 1.0, ErrorKind::input, "ibleu_combine: bBLEU outside [0, 1]");
  if (b_bleu >= 1.0 || semantic <= 0.0) return 0.0;
  return (beta + 1.0) / (beta / semantic + 1.0 / (1.0 - b_bleu));
}

inline double bert_ibleu(std::string_view source, std::string_view best, double beta, const TokenEmbedder& embedder) {
  const double semantic = token_match_similarity(source, best, embedder) / kReportScale;
  const double b_bleu = bleu(best, {std::string(source)}, 3) / kReportScale;
  return kReportScale * ibleu_combine(std::clamp(semantic, 0.0, 1.0), std::clamp(b_bleu, 0.0, 1.0), beta);
}

inline double sbert_ibleu(std::string_view source, std::string_view best, double beta, const SentenceEncoder& encoder) {
  const double semantic = sentence_cosine_similarity(source, best, encoder) / kReportScale;
  const double b_bleu = bleu(best, {std::string(source)}, 3) / kReportScale;
  return kReportScale * ibleu_combine(std::clamp(semantic, 0.0, 1.0), std::clamp(b_bleu, 0.0, 1.0), beta);
}

// ---------------------------------------------------------------------------
// beta calibration

struct PairScores {
  double bert = 0.0;   // token-matching similarity, 0..100
  double sbert = 0.0;  // sentence cosine similarity, 0..100
  double bleu = 0.0;   // BLEU-3(input, [reference]), 0..100
};

struct Calibration {
  double mean_bert = 0.0;
  double mean_sbert = 0.0;
  double mean_bleu = 0.0;
  double ratio_bert = 0.0;
  double ratio_sbert = 0.0;
  int beta = 1;
};

inline void to_json(nlohmann::json& j, const Calibration& c) {
  j = {{"mean_bert", c.mean_bert},   {"mean_sbert", c.mean_sbert}, {"mean_ibleu_component", c.mean_bleu},
       {"ratio_bert", c.ratio_bert}, {"ratio_sbert", c.ratio_sbert}, {"beta", c.beta}};
}

/// Averages the per-pair scores, takes the semantic/BLEU ratios and picks
/// beta as the mean of the two ratios rounded to the nearest positive integer.
inline Calibration calibrate_beta_from_scores(const std::vector<PairScores>& scores) {
  require(!scores.empty(), ErrorKind::input, "calibrate_beta: no pairs");
  Calibration c;
  for (const auto& s : scores) {
    c.mean_bert += s.bert;
    c.mean_sbert += s.sbert;
    c.mean_bleu += s.bleu;
  }
  const auto n = static_cast<double>(scores.size());
  c.mean_bert /= n;
  c.mean_sbert /= n;
  c.mean_bleu /= n;
  require(c.mean_bleu > 0.0, ErrorKind::input, "calibrate_beta: mean BLEU is 0, ratio undefined");
  c.ratio_bert = c.mean_bert / c.mean_bleu;
  c.ratio_sbert = c.mean_sbert / c.mean_bleu;
  c.beta = std::max(1, static_cast<int>(std::lround(0.5 * (c.ratio_bert + c.ratio_sbert))));
  return c;
}

inline PairScores score_pair(std::string_view input, std::string_view reference, const TokenEmbedder& embedder,
                             const SentenceEncoder& encoder) {
  return {token_match_similarity(input, reference, embedder), sentence_cosine_similarity(input, reference, encoder),
          bleu(input, {std::string(reference)}, 3)};
}

inline Calibration calibrate_beta(const std::vector<std::pair<std::string, std::string>>& pairs,
                                  const TokenEmbedder& embedder, const SentenceEncoder& encoder) {
  require(!pairs.empty(), ErrorKind::input, "calibrate_beta: no pairs");
  std::vector<PairScores> scores;
  scores.reserve(pairs.size());
  for (const auto& [input, reference] : pairs) scores.push_back(score_pair(input, reference, embedder, encoder));
  return calibrate_beta_from_scores(scores);
}

// ---------------------------------------------------------------------------
// corpus evaluation

struct EvalRecord {
  std::string source;
  std::vector<std::string> references;
  std::vector<std::string> candidates;
  std::size_t best = 0;
};

struct EvalConfig {
  double beta = 2.0;
  bool reference_max = false;  // BERT/SBERT vs references: max instead of mean
  bool strict = false;         // malformed record: throw instead of skip
  std::optional<std::unordered_map<std::string, double>> fluency;  // sha256 hex of sentence -> [0, 1]
};

struct MetricRow {
  double ori_bleu = 0, self_bleu = 0, bleu3 = 0, rouge_l = 0;
  double ori_bert = 0, bert = 0, ori_sbert = 0, sbert = 0;
  double bert_ibleu = 0, sbert_ibleu = 0;
  std::optional<double> fluency;
};

inline constexpr std::string_view kMetricColumns[] = {"oriBLEU", "selfBLEU", "BLEU-3",     "ROUGE-L",     "oriBERT",
                                                      "BERT",    "oriSBERT", "SBERT",      "BERT-iBLEU", "SBERT-iBLEU"};

inline std::vector<double> row_values(const MetricRow& r) {
  return {r.ori_bleu, r.self_bleu, r.bleu3, r.rouge_l, r.ori_bert, r.bert, r.ori_sbert, r.sbert, r.bert_ibleu,
          r.sbert_ibleu};
}

inline void to_json(nlohmann::json& j, const MetricRow& r) {
  j = nlohmann::json::object();
  const auto values = row_values(r);
  for (std::size_t i = 0; i < values.size(); ++i) j[std::string(kMetricColumns[i])] = values[i];
  if (r.fluency) j["fluency"] = *r.fluency;
}

struct MetricReport {
  std::vector<MetricRow> per_example;
  MetricRow means;
  std::size_t skipped = 0;
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
  j = {{"per_example", r.per_example}, {"means", r.means}, {"skipped", r.skipped}};
}

/// Validates a record; returns an empty string when it is well formed.
inline std::string record_problem(const EvalRecord& r) {
  if (r.references.empty()) return "record has no references";
  if (r.candidates.empty()) return "record has no candidates";
  if (r.best >= r.candidates.size()) return "best index out of range";
  if (metric_tokens(r.candidates[r.best]).empty()) return "best candidate is empty after normalization";
  if (metric_tokens(r.source).empty()) return "source is empty after normalization";
  return {};
}

inline MetricRow evaluate_record(const EvalRecord& r, const EvalConfig& cfg, const TokenEmbedder& embedder,
                                 const SentenceEncoder& encoder) {
  MetricRow row;
  const auto& best = r.candidates[r.best];
  row.ori_bleu = ori_bleu(r.source, r.candidates);
  // A lone candidate has no diversity to measure against; it counts as fully self-similar.
  row.self_bleu = r.candidates.size() >= 2 ? self_bleu(r.candidates) : kReportScale;
  row.bleu3 = bleu(best, r.references, 3);
  row.rouge_l = rouge_l(best, r.references);

  double ori_bert = 0.0, ori_sbert = 0.0;
  std::size_t scored = 0;
  for (const auto& c : r.candidates) {
    if (metric_tokens(c).empty()) continue;
    ori_bert += token_match_similarity(r.source, c, embedder);
    ori_sbert += sentence_cosine_similarity(r.source, c, encoder);
    ++scored;
  }
  row.ori_bert = ori_bert / static_cast<double>(scored);
  row.ori_sbert = ori_sbert / static_cast<double>(scored);

  double bert = 0.0, sbert = 0.0;
  std::size_t refs = 0;
  for (const auto& ref : r.references) {
    if (metric_tokens(ref).empty()) continue;
    const double b = token_match_similarity(best, ref, embedder);
    const double s = sentence_cosine_similarity(best, ref, encoder);
    if (cfg.reference_max) {
      bert = std::max(bert, b);
      sbert = std::max(sbert, s);
    } else {
      bert += b;
      sbert += s;
    }
    ++refs;
  }
  if (!cfg.reference_max && refs > 0) {
    bert /= static_cast<double>(refs);
    sbert /= static_cast<double>(refs);
  }
  row.bert = bert;
  row.sbert = sbert;
  row.bert_ibleu = bert_ibleu(r.source, best, cfg.beta, embedder);
  row.sbert_ibleu = sbert_ibleu(r.source, best, cfg.beta, encoder);
  if (cfg.fluency) {
    auto it = cfg.fluency->find(to_hex(sha256(best)));
    if (it != cfg.fluency->end()) row.fluency = kReportScale * it->second;
  }
  return row;
}

/// Per-record metric rows plus arithmetic means, in input order.
inline MetricReport evaluate_corpus(const std::vector<EvalRecord>& records, const EvalConfig& cfg,
                                    const TokenEmbedder& embedder, const SentenceEncoder& encoder) {
  MetricReport report;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto problem = record_problem(records[i]);
    if (!problem.empty()) {
      if (cfg.strict) fail(ErrorKind::input, "record " + std::to_string(i) + ": " + problem);
      ++report.skipped;
      continue;
    }
    report.per_example.push_back(evaluate_record(records[i], cfg, embedder, encoder));
  }
  if (report.per_example.empty()) return report;

  const double n = static_cast<double>(report.per_example.size());
  MetricRow& m = report.means;
  double fluency_sum = 0.0;
  std::size_t fluency_n = 0;
  for (const auto& r : report.per_example) {
    m.ori_bleu += r.ori_bleu;
    m.self_bleu += r.self_bleu;
    m.bleu3 += r.bleu3;
    m.rouge_l += r.rouge_l;
    m.ori_bert += r.ori_bert;
    m.bert += r.bert;
    m.ori_sbert += r.ori_sbert;
    m.sbert += r.sbert;
    m.bert_ibleu += r.bert_ibleu;
    m.sbert_ibleu += r.sbert_ibleu;
    if (r.fluency) {
      fluency_sum += *r.fluency;
      ++fluency_n;
    }
  }
  for (double* v : {&m.ori_bleu, &m.self_bleu, &m.bleu3, &m.rouge_l, &m.ori_bert, &m.bert, &m.ori_sbert, &m.sbert,
                    &m.bert_ibleu, &m.sbert_ibleu}) {
    *v /= n;
  }
  if (fluency_n > 0) m.fluency = fluency_sum / static_cast<double>(fluency_n);
  return report;
}

/// Aligned text table grouped as: lexical diversity | lexical similarity |
/// semantic similarity | lexically-dependent semantic similarity | fluency.
inline std::string format_report_table(const MetricReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "| lexical diversity   | lexical similarity  | semantic similarity                   "
         "| lexically-dependent sem. sim. | fluency |\n";
  out << "| oriBLEU  selfBLEU   | BLEU-3   ROUGE-L    | oriBERT  BERT     oriSBERT SBERT      "
         "| BERT-iBLEU  SBERT-iBLEU       | Flu     |\n";
  auto cell = [&](double v, int w) { out << std::setw(w) << v; };
  const auto& m = report.means;
  out << "| ";
  cell(m.ori_bleu, 7);
  out << "  ";
  cell(m.self_bleu, 8);
  out << "   | ";
  cell(m.bleu3, 7);
  out << "  ";
  cell(m.rouge_l, 7);
  out << "    | ";
  cell(m.ori_bert, 7);
  out << "  ";
  cell(m.bert, 7);
  out << "  ";
  cell(m.ori_sbert, 7);
  out << "  ";
  cell(m.sbert, 7);
  out << "    | ";
  cell(m.bert_ibleu, 10);
  out << "  ";
  cell(m.sbert_ibleu, 11);
  out << "       | ";
  if (m.fluency) {
    cell(*m.fluency, 7);
  } else {
    out << "      -";
  }
  out << " |\n";
  out << "records: " << report.per_example.size() << ", skipped: " << report.skipped << "\n";
  return out.str();
}

}  // namespace smclm
