#pragma once

#include <algorithm>
#include <cmath>

#include "chsnet/ops.hpp"

namespace chs {

enum class Reduction { mean, sum };

inline constexpr double kProbClamp = 1e-7;

/// Binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]; the
/// gradient is zero where the clamp is active.
template <typename T>
TensorPtr<T> bce_loss(GradTape<T>* tape, const Tensor<T>& y, const TensorPtr<T>& p,
                      Reduction reduction = Reduction::mean) {
  if (y.shape() != p->shape()) {
    throw DimensionError("bce_loss: target " + shape_str(y.shape()) + " vs prediction " + shape_str(p->shape()));
  }
  const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1.0 - kProbClamp);
  const std::size_t n = y.size();
  const T norm = reduction == Reduction::mean ? T(1) / static_cast<T>(n) : T(1);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T q = std::clamp((*p)[i], lo, hi);
    acc -= static_cast<double>(y[i]) * std::log(static_cast<double>(q)) +
           (1.0 - static_cast<double>(y[i])) * std::log(1.0 - static_cast<double>(q));
  }
  auto out = ops::detail::output_like<T>(tape, {1}, {p.get()});
  (*out)[0] = static_cast<T>(acc) * norm;
  if (out->requires_grad()) {
    tape->record("bce_loss", {p}, out, [pp = p.get(), op = out.get(), y, norm, lo, hi] {
      const T g = op->grad()[0] * norm;
      for (std::size_t i = 0; i < y.size(); ++i) {
        const T q = (*pp)[i];
        if (q < lo || q > hi) continue;
        pp->grad()[i] += g * (-y[i] / q + (T(1) - y[i]) / (T(1) - q));
      }
    });
  }
  return out;
}

/// 1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps).
template <typename T>
TensorPtr<T> dice_loss(GradTape<T>* tape, const Tensor<T>& y, const TensorPtr<T>& p, double smooth = 1.0) {
  if (y.shape() != p->shape()) {
    throw DimensionError("dice_loss: target " + shape_str(y.shape()) + " vs prediction " + shape_str(p->shape()));
  }
  if (smooth < 0.0) throw ConfigError("dice smoothing must be >= 0");
  double inter = 0.0, yy = 0.0, pp2 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    inter += static_cast<double>(y[i]) * (*p)[i];
    yy += static_cast<double>(y[i]) * y[i];
    pp2 += static_cast<double>((*p)[i]) * (*p)[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = yy + pp2 + smooth;
  if (den == 0.0) throw ContractError("dice_loss: 0/0 with zero smoothing on empty masks");
  auto out = ops::detail::output_like<T>(tape, {1}, {p.get()});
  (*out)[0] = static_cast<T>(1.0 - num / den);
  if (out->requires_grad()) {
    tape->record("dice_loss", {p}, out, [pp = p.get(), op = out.get(), y, num, den] {
      const double g = op->grad()[0];
      for (std::size_t i = 0; i < y.size(); ++i) {
        // d/dp_i of -(num/den) = -(2 y_i den - num 2 p_i) / den^2
        const double d = -(2.0 * y[i] * den - num * 2.0 * (*pp)[i]) / (den * den);
        pp->grad()[i] += static_cast<T>(g * d);
      }
    });
  }
  return out;
}

/// Average of binary cross-entropy and dice loss.
template <typename T>
TensorPtr<T> segmentation_loss(GradTape<T>* tape, const Tensor<T>& y, const TensorPtr<T>& p,
                               Reduction reduction = Reduction::mean, double smooth = 1.0) {
  auto bce = bce_loss(tape, y, p, reduction);
  auto dice = dice_loss(tape, y, p, smooth);
  return ops::add(tape, ops::scale(tape, bce, T(0.5)), ops::scale(tape, dice, T(0.5)));
}

}  // namespace chs
