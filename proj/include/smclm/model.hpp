#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "smclm/encoder.hpp"
#include "smclm/error.hpp"
#include "smclm/text.hpp"

namespace smclm {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 32;
  std::size_t layer_count = 2;
  std::size_t head_count = 4;
  std::size_t ff_dim = 128;
  std::size_t max_positions = 64;
  std::uint64_t seed = 0;

  void validate() const {
    require(vocab_size >= Vocabulary::kMinSize, ErrorKind::config, "model: vocab_size must be >= 5");
    require(embed_dim > 0 && layer_count > 0 && head_count > 0 && ff_dim > 0 && max_positions > 0,
            ErrorKind::config, "model: all sizes must be positive");
    require(embed_dim % head_count == 0, ErrorKind::config,
            "model: embed_dim " + std::to_string(embed_dim) + " not divisible by head_count " +
                std::to_string(head_count));
  }

  std::size_t head_dim() const noexcept { return embed_dim / head_count; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, vocab_size, embed_dim, layer_count, head_count, ff_dim,
                                                max_positions, seed)

/// Tensor groups used when reporting gradient checks per class.
enum class TensorClass { embedding, attention, feedforward, layer_norm };

template <typename T>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::string n, std::vector<std::size_t> s, T fill = T(0)) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (auto d : shape) count *= d;
    data.assign(count, fill);
  }

  std::size_t size() const noexcept { return data.size(); }
  T* row(std::size_t r) noexcept { return data.data() + r * shape.back(); }
  const T* row(std::size_t r) const noexcept { return data.data() + r * shape.back(); }
};

template <typename T>
struct Block {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> qkv_weight, qkv_bias;          // d x 3d, 3d
  Tensor<T> attn_out_weight, attn_out_bias;  // d x d, d
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ff_in_weight, ff_in_bias;    // d x F, F
  Tensor<T> ff_out_weight, ff_out_bias;  // F x d, d
};

/// All trainable tensors. The output head is tied to token_embedding.
template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> token_embedding;     // M x d
  Tensor<T> position_embedding;  // P_max x d
  std::vector<Block<T>> blocks;
  Tensor<T> final_ln_gain, final_ln_bias;

  /// Zero-filled parameters (layer-norm gains too); used for gradients.
  static ModelParams zeros(const ModelConfig& cfg) {
    cfg.validate();
    const auto d = cfg.embed_dim, f = cfg.ff_dim;
    ModelParams p;
    p.config = cfg;
    p.token_embedding = Tensor<T>("token_embedding", {cfg.vocab_size, d});
    p.position_embedding = Tensor<T>("position_embedding", {cfg.max_positions, d});
    for (std::size_t l = 0; l < cfg.layer_count; ++l) {
      const std::string pre = "blocks." + std::to_string(l) + ".";
      Block<T> b;
      b.ln1_gain = Tensor<T>(pre + "ln1.gain", {d});
      b.ln1_bias = Tensor<T>(pre + "ln1.bias", {d});
      b.qkv_weight = Tensor<T>(pre + "attn.qkv.weight", {d, 3 * d});
      b.qkv_bias = Tensor<T>(pre + "attn.qkv.bias", {3 * d});
      b.attn_out_weight = Tensor<T>(pre + "attn.out.weight", {d, d});
      b.attn_out_bias = Tensor<T>(pre + "attn.out.bias", {d});
      b.ln2_gain = Tensor<T>(pre + "ln2.gain", {d});
      b.ln2_bias = Tensor<T>(pre + "ln2.bias", {d});
      b.ff_in_weight = Tensor<T>(pre + "ff.in.weight", {d, f});
      b.ff_in_bias = Tensor<T>(pre + "ff.in.bias", {f});
      b.ff_out_weight = Tensor<T>(pre + "ff.out.weight", {f, d});
      b.ff_out_bias = Tensor<T>(pre + "ff.out.bias", {d});
      p.blocks.push_back(std::move(b));
    }
    p.final_ln_gain = Tensor<T>("final_ln.gain", {d});
    p.final_ln_bias = Tensor<T>("final_ln.bias", {d});
    return p;
  }

  /// N(0, 0.02) for embeddings and projections, zero biases, unit layer-norm gains.
  static ModelParams initialize(const ModelConfig& cfg) {
    ModelParams p = zeros(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    p.visit([&](Tensor<T>& t, TensorClass cls) {
      const bool is_bias = t.name.ends_with(".bias");
      const bool is_gain = t.name.ends_with(".gain");
      if (is_gain) {
        std::fill(t.data.begin(), t.data.end(), T(1));
      } else if (!is_bias && cls != TensorClass::layer_norm) {
        for (auto& x : t.data) x = static_cast<T>(normal(rng));
      }
    });
    return p;
  }

  /// Visits every tensor in the fixed serialization order.
  template <typename F>
  void visit(F&& f) {
    f(token_embedding, TensorClass::embedding);
    f(position_embedding, TensorClass::embedding);
    for (auto& b : blocks) {
      f(b.ln1_gain, TensorClass::layer_norm);
      f(b.ln1_bias, TensorClass::layer_norm);
      f(b.qkv_weight, TensorClass::attention);
      f(b.qkv_bias, TensorClass::attention);
      f(b.attn_out_weight, TensorClass::attention);
      f(b.attn_out_bias, TensorClass::attention);
      f(b.ln2_gain, TensorClass::layer_norm);
      f(b.ln2_bias, TensorClass::layer_norm);
      f(b.ff_in_weight, TensorClass::feedforward);
      f(b.ff_in_bias, TensorClass::feedforward);
      f(b.ff_out_weight, TensorClass::feedforward);
      f(b.ff_out_bias, TensorClass::feedforward);
    }
    f(final_ln_gain, TensorClass::layer_norm);
    f(final_ln_bias, TensorClass::layer_norm);
  }

  template <typename F>
  void visit(F&& f) const {
    const_cast<ModelParams*>(this)->visit([&](Tensor<T>& t, TensorClass c) { f(static_cast<const Tensor<T>&>(t), c); });
  }

  /// Flat views over all tensors, in visit order.
  std::vector<Tensor<T>*> tensors() {
    std::vector<Tensor<T>*> out;
    visit([&](Tensor<T>& t, TensorClass) { out.push_back(&t); });
    return out;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(config);
    auto dst = out.tensors();
    std::size_t i = 0;
    visit([&](const Tensor<T>& t, TensorClass) {
      auto& d = *dst[i++];
      for (std::size_t k = 0; k < t.size(); ++k) d.data[k] = static_cast<U>(t.data[k]);
    });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const Tensor<T>& t, TensorClass) { n += t.size(); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&](const Tensor<T>& t, TensorClass) {
      for (T x : t.data) ok = ok && std::isfinite(static_cast<double>(x));
    });
    return ok;
  }

  double squared_norm() const {
    double s = 0.0;
    visit([&](const Tensor<T>& t, TensorClass) {
      for (T x : t.data) s += static_cast<double>(x) * static_cast<double>(x);
    });
    return s;
  }
};

/// h(s) placed at position 0 followed by the sentence body; EOS is implied
/// as the final prediction target.
struct InjectedSequence {
  SentenceEmbedding injection;
  std::vector<TokenId> body;
};

/// Per-position caches kept for backpropagation.
template <typename T>
struct BlockCache {
  std::vector<T> input, ln1_out, ln1_xhat, ln1_rstd;
  std::vector<T> qkv, probs, attn;  // probs: H x N x N
  std::vector<T> mid, ln2_out, ln2_xhat, ln2_rstd;
  std::vector<T> ff_pre, ff_act;
};

template <typename T>
struct ForwardResult {
  std::size_t length = 0;
  std::vector<T> logits;  // length x M
  std::vector<TokenId> ids;
  bool injected = false;
  // Caches, filled when requested.
  std::vector<BlockCache<T>> blocks;
  std::vector<T> final_in, final_xhat, final_rstd, final_out;

  std::span<const T> row(std::size_t t, std::size_t m) const { return {logits.data() + t * m, m}; }
};

/// Log-softmax in double precision.
template <typename T>
std::vector<double> log_softmax(std::span<const T> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T x : logits) mx = std::max(mx, static_cast<double>(x));
  double s = 0.0;
  for (T x : logits) s += std::exp(static_cast<double>(x) - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layer_norm(const T* x, const T* gain, const T* bias, std::size_t d, T* out, T* xhat, T* rstd_out) {
  T mean = 0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<T>(d);
  T var = 0;
  for (std::size_t i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<T>(d);
  const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    out[i] = xhat[i] * gain[i] + bias[i];
  }
  *rstd_out = rstd;
}

// dx += layer-norm backward; accumulates gain/bias gradients.
template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, T rstd, const T* gain, std::size_t d, T* dx, T* dgain,
                         T* dbias) {
  T mean_dxhat = 0, mean_dxhat_xhat = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const T dxhat = dy[i] * gain[i];
    mean_dxhat += dxhat;
    mean_dxhat_xhat += dxhat * xhat[i];
    dgain[i] += dy[i] * xhat[i];
    dbias[i] += dy[i];
  }
  mean_dxhat /= static_cast<T>(d);
  mean_dxhat_xhat /= static_cast<T>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const T dxhat = dy[i] * gain[i];
    dx[i] += rstd * (dxhat - mean_dxhat - xhat[i] * mean_dxhat_xhat);
  }
}

// out[n x o] = in[n x i] * w[i x o] + b[o]
template <typename T>
void affine(const T* in, const T* w, const T* b, std::size_t n, std::size_t ni, std::size_t no, T* out) {
  for (std::size_t r = 0; r < n; ++r) {
    T* o = out + r * no;
    for (std::size_t j = 0; j < no; ++j) o[j] = b[j];
    const T* x = in + r * ni;
    for (std::size_t k = 0; k < ni; ++k) {
      const T xk = x[k];
      const T* wr = w + k * no;
      for (std::size_t j = 0; j < no; ++j) o[j] += xk * wr[j];
    }
  }
}

// Given dout[n x o]: dw += in^T dout, db += sum dout, din += dout w^T.
template <typename T>
void affine_backward(const T* in, const T* w, const T* dout, std::size_t n, std::size_t ni, std::size_t no, T* dw,
                     T* db, T* din) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* go = dout + r * no;
    const T* x = in + r * ni;
    T* gx = din + r * ni;
    for (std::size_t j = 0; j < no; ++j) db[j] += go[j];
    for (std::size_t k = 0; k < ni; ++k) {
      const T* wr = w + k * no;
      T* dwr = dw + k * no;
      T acc = 0;
      const T xk = x[k];
      for (std::size_t j = 0; j < no; ++j) {
        dwr[j] += xk * go[j];
        acc += go[j] * wr[j];
      }
      gx[k] += acc;
    }
  }
}

template <typename T>
T gelu(T x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const T inner = static_cast<T>(c) * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T x) {
  constexpr double c = 0.7978845608028654;
  const T inner = static_cast<T>(c) * (x + static_cast<T>(0.044715) * x * x * x);
  const T th = std::tanh(inner);
  const T dinner = static_cast<T>(c) * (T(1) + static_cast<T>(3 * 0.044715) * x * x);
  return static_cast<T>(0.5) * (T(1) + th) + static_cast<T>(0.5) * x * (T(1) - th * th) * dinner;
}

}  // namespace detail

/// Runs the transformer over `ids`. When `injection` is non-empty it replaces
/// the token embedding at position 0 (and only there); the positional
/// embedding is added to it exactly as for a token.
template <typename T>
ForwardResult<T> forward_ids(const ModelParams<T>& p, std::span<const float> injection, std::span<const TokenId> ids,
                             bool keep_cache = false) {
  const auto& cfg = p.config;
  const std::size_t n = ids.size(), d = cfg.embed_dim, m = cfg.vocab_size, f = cfg.ff_dim;
  const std::size_t heads = cfg.head_count, hd = cfg.head_dim();
  require(n >= 1, ErrorKind::length, "forward: empty sequence");
  require(n <= cfg.max_positions, ErrorKind::length,
          "forward: sequence length " + std::to_string(n) + " exceeds max_positions " +
              std::to_string(cfg.max_positions));
  require(injection.empty() || injection.size() == d, ErrorKind::dimension,
          "forward: injection dim " + std::to_string(injection.size()) + " != embed_dim " + std::to_string(d));
  for (auto id : ids) {
    require(id < m, ErrorKind::input, "forward: token id " + std::to_string(id) + " >= vocab size");
  }

  ForwardResult<T> r;
  r.length = n;
  r.ids.assign(ids.begin(), ids.end());
  r.injected = !injection.empty();

  std::vector<T> x(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    const T* pos = p.position_embedding.row(t);
    if (t == 0 && r.injected) {
      for (std::size_t i = 0; i < d; ++i) x[i] = static_cast<T>(injection[i]) + pos[i];
    } else {
      const T* tok = p.token_embedding.row(ids[t]);
      for (std::size_t i = 0; i < d; ++i) x[t * d + i] = tok[i] + pos[i];
    }
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> ln_out(n * d), xhat(n * d), rstd(n), qkv(n * 3 * d), probs(heads * n * n), attn(n * d);
  std::vector<T> proj(n * d), ff_pre(n * f), ff_act(n * f), ff_out(n * d), mid(n * d);
  std::vector<T> ln2_out(n * d), xhat2(n * d), rstd2(n);

  for (const auto& b : p.blocks) {
    BlockCache<T> cache;
    if (keep_cache) cache.input = x;

    for (std::size_t t = 0; t < n; ++t) {
      detail::layer_norm(&x[t * d], b.ln1_gain.data.data(), b.ln1_bias.data.data(), d, &ln_out[t * d], &xhat[t * d],
                         &rstd[t]);
    }
    detail::affine(ln_out.data(), b.qkv_weight.data.data(), b.qkv_bias.data.data(), n, d, 3 * d, qkv.data());

    std::fill(attn.begin(), attn.end(), T(0));
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        const T* q = &qkv[t * 3 * d + h * hd];
        T* prow = &probs[(h * n + t) * n];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          const T* k = &qkv[s * 3 * d + d + h * hd];
          T dot = 0;
          for (std::size_t j = 0; j < hd; ++j) dot += q[j] * k[j];
          prow[s] = dot * scale;
          mx = std::max(mx, prow[s]);
        }
        T sum = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          prow[s] = std::exp(prow[s] - mx);
          sum += prow[s];
        }
        for (std::size_t s = 0; s <= t; ++s) prow[s] /= sum;
        for (std::size_t s = t + 1; s < n; ++s) prow[s] = T(0);
        T* out = &attn[t * d + h * hd];
        for (std::size_t s = 0; s <= t; ++s) {
          const T* v = &qkv[s * 3 * d + 2 * d + h * hd];
          for (std::size_t j = 0; j < hd; ++j) out[j] += prow[s] * v[j];
        }
      }
    }
    detail::affine(attn.data(), b.attn_out_weight.data.data(), b.attn_out_bias.data.data(), n, d, d, proj.data());
    for (std::size_t i = 0; i < n * d; ++i) mid[i] = x[i] + proj[i];

    for (std::size_t t = 0; t < n; ++t) {
      detail::layer_norm(&mid[t * d], b.ln2_gain.data.data(), b.ln2_bias.data.data(), d, &ln2_out[t * d],
                         &xhat2[t * d], &rstd2[t]);
    }
    detail::affine(ln2_out.data(), b.ff_in_weight.data.data(), b.ff_in_bias.data.data(), n, d, f, ff_pre.data());
    for (std::size_t i = 0; i < n * f; ++i) ff_act[i] = detail::gelu(ff_pre[i]);
    detail::affine(ff_act.data(), b.ff_out_weight.data.data(), b.ff_out_bias.data.data(), n, f, d, ff_out.data());
    for (std::size_t i = 0; i < n * d; ++i) x[i] = mid[i] + ff_out[i];

    if (keep_cache) {
      cache.ln1_out = ln_out;
      cache.ln1_xhat = xhat;
      cache.ln1_rstd = rstd;
      cache.qkv = qkv;
      cache.probs = probs;
      cache.attn = attn;
      cache.mid = mid;
      cache.ln2_out = ln2_out;
      cache.ln2_xhat = xhat2;
      cache.ln2_rstd = rstd2;
      cache.ff_pre = ff_pre;
      cache.ff_act = ff_act;
      r.blocks.push_back(std::move(cache));
    }
  }

  std::vector<T> final_out(n * d);
  for (std::size_t t = 0; t < n; ++t) {
    detail::layer_norm(&x[t * d], p.final_ln_gain.data.data(), p.final_ln_bias.data.data(), d, &final_out[t * d],
                       &xhat[t * d], &rstd[t]);
  }
  r.logits.assign(n * m, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    const T* h = &final_out[t * d];
    T* out = &r.logits[t * m];
    for (std::size_t v = 0; v < m; ++v) {
      const T* e = p.token_embedding.row(v);
      T dot = 0;
      for (std::size_t i = 0; i < d; ++i) dot += h[i] * e[i];
      out[v] = dot;
    }
  }
  if (keep_cache) {
    r.final_in = std::move(x);
    r.final_xhat = xhat;
    r.final_rstd = rstd;
    r.final_out = std::move(final_out);
  }
  return r;
}

/// Plain causal LM forward over a token sequence (normally BOS-prefixed).
template <typename T>
ForwardResult<T> forward(const ModelParams<T>& p, const TokenSequence& seq) {
  return forward_ids(p, {}, std::span<const TokenId>(seq.ids));
}

/// Injected forward: position 0 carries h(s), positions 1.. carry the body.
template <typename T>
ForwardResult<T> forward(const ModelParams<T>& p, const InjectedSequence& seq) {
  std::vector<TokenId> ids{Vocabulary::kBos};
  ids.insert(ids.end(), seq.body.begin(), seq.body.end());
  return forward_ids(p, std::span<const float>(seq.injection.values), std::span<const TokenId>(ids));
}

struct LossResult {
  double loss = 0.0;                  // mean negative log-likelihood per target
  std::vector<double> token_logprobs;  // one per target (body tokens then EOS)

  double sum_logprob() const {
    double s = 0.0;
    for (double x : token_logprobs) s += x;
    return s;
  }
};

/// A training/evaluation example: position-0 input (an injection or BOS),
/// then the body; targets are the body followed by EOS.
struct Example {
  std::vector<float> injection;  // empty: plain BOS-prefixed CLM
  std::vector<TokenId> body;

  static Example injected(const InjectedSequence& s) { return {s.injection.values, s.body}; }
  static Example plain(std::vector<TokenId> body) { return {{}, std::move(body)}; }

  std::size_t input_length() const noexcept { return body.size() + 1; }
  std::size_t target_count() const noexcept { return body.size() + 1; }
};

namespace detail {

inline std::vector<TokenId> example_inputs(const Example& ex) {
  std::vector<TokenId> ids{Vocabulary::kBos};
  ids.insert(ids.end(), ex.body.begin(), ex.body.end());
  return ids;
}

inline std::vector<TokenId> example_targets(const Example& ex) {
  std::vector<TokenId> targets(ex.body.begin(), ex.body.end());
  targets.push_back(Vocabulary::kEos);
  return targets;
}

template <typename T>
LossResult loss_from_logits(const ForwardResult<T>& fr, std::span<const TokenId> targets, std::size_t vocab) {
  LossResult out;
  out.token_logprobs.reserve(targets.size());
  double total = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto lp = log_softmax(fr.row(t, vocab));
    out.token_logprobs.push_back(lp[targets[t]]);
    total -= lp[targets[t]];
  }
  out.loss = total / static_cast<double>(targets.size());
  return out;
}

}  // namespace detail

template <typename T>
LossResult nll_loss(const ModelParams<T>& p, const Example& ex) {
  const auto ids = detail::example_inputs(ex);
  const auto targets = detail::example_targets(ex);
  const auto fr = forward_ids(p, std::span<const float>(ex.injection), std::span<const TokenId>(ids));
  return detail::loss_from_logits(fr, targets, p.config.vocab_size);
}

template <typename T>
LossResult nll_loss(const ModelParams<T>& p, const InjectedSequence& seq) {
  return nll_loss(p, Example::injected(seq));
}

/// log P'(body, EOS | h(s)): the sum of per-target log-probabilities.
template <typename T>
double sequence_logprob(const ModelParams<T>& p, const SentenceEmbedding& injection, std::span<const TokenId> body) {
  return nll_loss(p, Example{injection.values, {body.begin(), body.end()}}).sum_logprob();
}

/// Accumulates `scale` x d(mean NLL)/dTheta into `grad` and returns the loss.
template <typename T>
LossResult accumulate_gradient(const ModelParams<T>& p, const Example& ex, ModelParams<T>& grad, T scale = T(1)) {
  const auto& cfg = p.config;
  const std::size_t d = cfg.embed_dim, m = cfg.vocab_size, f = cfg.ff_dim;
  const std::size_t heads = cfg.head_count, hd = cfg.head_dim();
  const auto ids = detail::example_inputs(ex);
  const auto targets = detail::example_targets(ex);
  const auto fr = forward_ids(p, std::span<const float>(ex.injection), std::span<const TokenId>(ids), true);
  const std::size_t n = fr.length;
  LossResult loss = detail::loss_from_logits(fr, targets, m);

  // dL/dlogits = (softmax - onehot) / n_targets
  const T inv_n = scale / static_cast<T>(targets.size());
  std::vector<T> dlogits(n * m);
  for (std::size_t t = 0; t < n; ++t) {
    const auto row = fr.row(t, m);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T sum = 0;
    for (std::size_t v = 0; v < m; ++v) sum += std::exp(row[v] - mx);
    for (std::size_t v = 0; v < m; ++v) dlogits[t * m + v] = std::exp(row[v] - mx) / sum * inv_n;
    dlogits[t * m + targets[t]] -= inv_n;
  }

  // Tied head: logits = final_out * E^T.
  std::vector<T> dfinal(n * d, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    const T* h = &fr.final_out[t * d];
    T* dh = &dfinal[t * d];
    for (std::size_t v = 0; v < m; ++v) {
      const T g = dlogits[t * m + v];
      if (g == T(0)) continue;
      const T* e = p.token_embedding.row(v);
      T* de = grad.token_embedding.row(v);
      for (std::size_t i = 0; i < d; ++i) {
        de[i] += g * h[i];
        dh[i] += g * e[i];
      }
    }
  }

  std::vector<T> dx(n * d, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    detail::layer_norm_backward(&dfinal[t * d], &fr.final_xhat[t * d], fr.final_rstd[t], p.final_ln_gain.data.data(), d,
                                &dx[t * d], grad.final_ln_gain.data.data(), grad.final_ln_bias.data.data());
  }

  const T scale_attn = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<T> dff_act(n * f), dff_pre(n * f), dln2(n * d), dmid(n * d), dattn(n * d), dqkv(n * 3 * d), dln1(n * d);
  std::vector<T> dp(n);
  for (std::size_t l = cfg.layer_count; l-- > 0;) {
    const auto& b = p.blocks[l];
    auto& gb = grad.blocks[l];
    const auto& c = fr.blocks[l];

    // x_out = mid + ff(ln2(mid))
    std::fill(dff_act.begin(), dff_act.end(), T(0));
    detail::affine_backward(c.ff_act.data(), b.ff_out_weight.data.data(), dx.data(), n, f, d,
                            gb.ff_out_weight.data.data(), gb.ff_out_bias.data.data(), dff_act.data());
    for (std::size_t i = 0; i < n * f; ++i) dff_pre[i] = dff_act[i] * detail::gelu_grad(c.ff_pre[i]);
    std::fill(dln2.begin(), dln2.end(), T(0));
    detail::affine_backward(c.ln2_out.data(), b.ff_in_weight.data.data(), dff_pre.data(), n, d, f,
                            gb.ff_in_weight.data.data(), gb.ff_in_bias.data.data(), dln2.data());
    dmid = dx;
    for (std::size_t t = 0; t < n; ++t) {
      detail::layer_norm_backward(&dln2[t * d], &c.ln2_xhat[t * d], c.ln2_rstd[t], b.ln2_gain.data.data(), d,
                                  &dmid[t * d], gb.ln2_gain.data.data(), gb.ln2_bias.data.data());
    }

    // mid = x_in + attn_out(attention(ln1(x_in)))
    std::fill(dattn.begin(), dattn.end(), T(0));
    detail::affine_backward(c.attn.data(), b.attn_out_weight.data.data(), dmid.data(), n, d, d,
                            gb.attn_out_weight.data.data(), gb.attn_out_bias.data.data(), dattn.data());
    std::fill(dqkv.begin(), dqkv.end(), T(0));
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        const T* prow = &c.probs[(h * n + t) * n];
        const T* go = &dattn[t * d + h * hd];
        T dot_pdp = 0;
        for (std::size_t s = 0; s <= t; ++s) {
          const T* v = &c.qkv[s * 3 * d + 2 * d + h * hd];
          T* dv = &dqkv[s * 3 * d + 2 * d + h * hd];
          T acc = 0;
          for (std::size_t j = 0; j < hd; ++j) {
            acc += go[j] * v[j];
            dv[j] += prow[s] * go[j];
          }
          dp[s] = acc;
          dot_pdp += prow[s] * acc;
        }
        const T* q = &c.qkv[t * 3 * d + h * hd];
        T* dq = &dqkv[t * 3 * d + h * hd];
        for (std::size_t s = 0; s <= t; ++s) {
          const T ds = prow[s] * (dp[s] - dot_pdp) * scale_attn;
          if (ds == T(0)) continue;
          const T* k = &c.qkv[s * 3 * d + d + h * hd];
          T* dk = &dqkv[s * 3 * d + d + h * hd];
          for (std::size_t j = 0; j < hd; ++j) {
            dq[j] += ds * k[j];
            dk[j] += ds * q[j];
          }
        }
      }
    }
    std::fill(dln1.begin(), dln1.end(), T(0));
    detail::affine_backward(c.ln1_out.data(), b.qkv_weight.data.data(), dqkv.data(), n, d, 3 * d,
                            gb.qkv_weight.data.data(), gb.qkv_bias.data.data(), dln1.data());
    dx = dmid;
    for (std::size_t t = 0; t < n; ++t) {
      detail::layer_norm_backward(&dln1[t * d], &c.ln1_xhat[t * d], c.ln1_rstd[t], b.ln1_gain.data.data(), d,
                                  &dx[t * d], gb.ln1_gain.data.data(), gb.ln1_bias.data.data());
    }
  }

  for (std::size_t t = 0; t < n; ++t) {
    T* dpos = grad.position_embedding.row(t);
    for (std::size_t i = 0; i < d; ++i) dpos[i] += dx[t * d + i];
    if (t == 0 && fr.injected) continue;  // the frozen encoder receives no gradient
    T* dtok = grad.token_embedding.row(ids[t]);
    for (std::size_t i = 0; i < d; ++i) dtok[i] += dx[t * d + i];
  }
  return loss;
}

/// Exact gradient of nll_loss with respect to every tensor.
template <typename T>
std::pair<ModelParams<T>, LossResult> backward(const ModelParams<T>& p, const Example& ex) {
  auto grad = ModelParams<T>::zeros(p.config);
  auto loss = accumulate_gradient(p, ex, grad);
  return {std::move(grad), std::move(loss)};
}

template <typename T>
std::pair<ModelParams<T>, LossResult> backward(const ModelParams<T>& p, const InjectedSequence& seq) {
  return backward(p, Example::injected(seq));
}

/// Next-token log-probabilities after `prefix`, conditioned on an injection.
/// Adapts a model to the decoding interface.
template <typename T>
class ModelScorer {
 public:
  ModelScorer(const ModelParams<T>& params, SentenceEmbedding injection)
      : params_(params), injection_(std::move(injection)) {
    require(injection_.dim() == params.config.embed_dim, ErrorKind::dimension,
            "decoder: injection dim " + std::to_string(injection_.dim()) + " != model embed_dim " +
                std::to_string(params.config.embed_dim));
  }

  std::size_t vocab_size() const noexcept { return params_.config.vocab_size; }
  TokenId eos_id() const noexcept { return Vocabulary::kEos; }
  /// Generated tokens the position budget allows (position 0 holds h(s)).
  std::size_t max_generated() const noexcept { return params_.config.max_positions; }

  std::vector<double> next_logprobs(std::span<const TokenId> prefix) const {
    std::vector<TokenId> ids{Vocabulary::kBos};
    ids.insert(ids.end(), prefix.begin(), prefix.end());
    const auto fr = forward_ids(params_, std::span<const float>(injection_.values), std::span<const TokenId>(ids));
    return log_softmax(fr.row(fr.length - 1, vocab_size()));
  }

 private:
  const ModelParams<T>& params_;
  SentenceEmbedding injection_;
};

}  // namespace smclm
