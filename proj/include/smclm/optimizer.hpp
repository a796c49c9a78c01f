#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "smclm/error.hpp"
#include "smclm/model.hpp"

namespace smclm {

/// Linear warmup from 0 to the peak rate, then linear decay to 0 at the
/// final update. `step` is the 0-based index of the update being applied.
class LinearWarmupSchedule {
 public:
  LinearWarmupSchedule(double peak, std::size_t warmup_steps, std::size_t total_steps)
      : peak_(peak), warmup_(warmup_steps), total_(total_steps) {
    require(peak > 0.0, ErrorKind::config, "schedule: learning rate must be positive");
    require(total_steps > 0, ErrorKind::config, "schedule: total steps must be positive");
    require(warmup_steps <= total_steps, ErrorKind::config,
            "schedule: warmup_steps " + std::to_string(warmup_steps) + " exceeds total steps " +
                std::to_string(total_steps));
  }

  double operator()(std::size_t step) const {
    if (step < warmup_) return peak_ * static_cast<double>(step) / static_cast<double>(warmup_);
    if (step >= total_) return 0.0;
    const double span = static_cast<double>(total_ - warmup_);
    return peak_ * static_cast<double>(total_ - step) / span;
  }

  std::size_t total_steps() const noexcept { return total_; }
  std::size_t warmup_steps() const noexcept { return warmup_; }

 private:
  double peak_;
  std::size_t warmup_;
  std::size_t total_;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-2;
};

inline bool decays(const std::string& tensor_name) {
  return !(tensor_name.ends_with(".bias") || tensor_name.ends_with(".gain"));
}

/// Adam with decoupled weight decay. Moments are kept in double.
template <typename T>
class AdamW {
 public:
  AdamW(const ModelParams<T>& params, AdamWConfig cfg) : cfg_(cfg) {
    params.visit([&](const Tensor<T>& t, TensorClass) {
      first_.emplace_back(t.size(), 0.0);
      second_.emplace_back(t.size(), 0.0);
    });
  }

  void step(ModelParams<T>& params, const ModelParams<T>& grad, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    auto ps = params.tensors();
    auto gs = const_cast<ModelParams<T>&>(grad).tensors();
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto& p = ps[k]->data;
      const auto& g = gs[k]->data;
      auto& m = first_[k];
      auto& v = second_[k];
      const double decay = decays(ps[k]->name) ? 1.0 - lr * cfg_.weight_decay : 1.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        double x = static_cast<double>(p[i]) * decay;
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        p[i] = static_cast<T>(x);
      }
    }
  }

  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> first_, second_;
};

/// Scales the gradient so its global L2 norm is at most `max_norm`; returns the pre-clip norm.
template <typename T>
double clip_global_norm(ModelParams<T>& grad, double max_norm) {
  const double norm = std::sqrt(grad.squared_norm());
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    grad.visit([&](Tensor<T>& t, TensorClass) {
      for (auto& x : t.data) x = static_cast<T>(static_cast<double>(x) * s);
    });
  }
  return norm;
}

}  // namespace smclm
