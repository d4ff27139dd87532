#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "chsnet/tape.hpp"

namespace chs {

template <typename T>
using ScalarFn = std::function<TensorPtr<T>(GradTape<T>*)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Check at most this many coordinates per tensor (0 = all), chosen by a
  /// seeded shuffle.
  std::size_t max_coords = 0;
  unsigned seed = 0;
  /// When > 0, a coordinate whose forward and backward one-sided slopes
  /// differ by more than kink_tol (relative) has a ReLU/max kink inside the
  /// step; it is skipped and counted instead of compared.
  double kink_tol = 0.0;
  /// Tensors whose analytic gradient stays below this in magnitude (e.g. a
  /// bias whose shift a later train-mode batch norm removes) are bounded
  /// in absolute terms via max_abs_null; a relative error would only
  /// measure rounding noise there.
  double null_threshold = 0.0;
  /// Denominator floor of the relative error. Central differences of an
  /// O(1) scalar carry ~1e-16/eps of rounding, so gradients much below
  /// that scale/tolerance are effectively compared in absolute terms.
  double rel_floor = 1e-8;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;
  /// Largest |central difference| over null-gradient tensors.
  double max_abs_null = 0.0;
  std::size_t null_tensors = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every coordinate of every tensor in `wrt`.
///
/// Relative error per coordinate is |a - c| / max(|a|, |c|, rel_floor).
template <typename T>
GradCheckResult grad_check(const ScalarFn<T>& f, const std::vector<TensorPtr<T>>& wrt,
                           GradCheckOptions opt = {}) {
  if (!(opt.eps > 0.0)) throw ConfigError("grad_check eps must be positive");
  std::vector<bool> saved_flags;
  for (const auto& t : wrt) {
    saved_flags.push_back(t->requires_grad());
    t->set_requires_grad(true);
  }
  std::vector<std::vector<T>> analytic;
  {
    GradTape<T> tape;
    auto loss = f(&tape);
    if (loss->size() != 1) throw ContractError("grad_check: function output is not scalar");
    backward(tape, loss);
    for (const auto& t : wrt) {
      analytic.emplace_back(t->has_grad() ? std::vector<T>(t->grad().begin(), t->grad().end())
                                          : std::vector<T>(t->size(), T(0)));
    }
  }

  auto eval = [&]() { return static_cast<double>(f(nullptr)->item()); };

  GradCheckResult res;
  const double f0 = opt.kink_tol > 0.0 ? eval() : 0.0;
  std::mt19937 rng(opt.seed);
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto& t = *wrt[ti];
    double peak = 0.0;
    for (auto g : analytic[ti]) peak = std::max(peak, std::abs(static_cast<double>(g)));
    const bool null = opt.null_threshold > 0.0 && peak < opt.null_threshold;
    res.null_tensors += null;
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (opt.max_coords && idx.size() > opt.max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_coords);
    }
    for (auto i : idx) {
      const T orig = t[i];
      t[i] = static_cast<T>(orig + opt.eps);
      const double fp = eval();
      t[i] = static_cast<T>(orig - opt.eps);
      const double fm = eval();
      t[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      if (opt.kink_tol > 0.0) {
        const double up = (fp - f0) / opt.eps, down = (f0 - fm) / opt.eps;
        if (std::abs(up - down) > opt.kink_tol * std::max({std::abs(up), std::abs(down), 1e-3})) {
          ++res.coords_skipped;
          continue;
        }
      }
      if (null) {
        res.max_abs_null = std::max(res.max_abs_null, std::abs(numeric));
        continue;
      }
      const double a = analytic[ti][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.rel_floor});
      const double err = std::abs(a - numeric) / denom;
      ++res.coords_checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_tensor = ti;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  for (std::size_t i = 0; i < wrt.size(); ++i) wrt[i]->set_requires_grad(saved_flags[i]);
  return res;
}

/// Single-input convenience form: f maps x to a scalar.
template <typename T>
double grad_check(const std::function<TensorPtr<T>(GradTape<T>*, const TensorPtr<T>&)>& f, const TensorPtr<T>& x,
                  double eps = 1e-5) {
  return grad_check<T>([&](GradTape<T>* tape) { return f(tape, x); }, {x}, GradCheckOptions{eps}).max_rel_error;
}

}  // namespace chs
