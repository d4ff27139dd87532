#pragma once

#include <cmath>
#include <vector>

#include "chsnet/tensor.hpp"

namespace chs {

enum class OptimizerKind { adam, sgd };

/// Adam over a fixed parameter list (plain SGD when kind == sgd).
template <typename T>
class Optimizer {
 public:
  Optimizer(std::vector<TensorPtr<T>> params, double lr, OptimizerKind kind = OptimizerKind::adam,
            double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), kind_(kind), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (kind_ == OptimizerKind::adam) {
      for (const auto& p : params_) {
        m_.emplace_back(p->size(), T(0));
        v_.emplace_back(p->size(), T(0));
      }
    }
  }

  /// Applies one update from the current gradients; parameters without a
  /// gradient buffer are left alone.
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.data();
      if (kind_ == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= static_cast<T>(lr_) * g[i];
        continue;
      }
      const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
      const T step = static_cast<T>(lr_ / c1), root_c2 = static_cast<T>(std::sqrt(c2)), eps = static_cast<T>(eps_);
      T* m = m_[k].data();
      T* v = v_[k].data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= step * m[i] / (std::sqrt(v[i]) / root_c2 + eps);
      }
    }
  }

  double learning_rate() const { return lr_; }
  long steps() const { return t_; }

 private:
  std::vector<TensorPtr<T>> params_;
  double lr_;
  OptimizerKind kind_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace chs
