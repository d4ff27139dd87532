#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "chsnet/grad_check.hpp"
#include "chsnet/layers.hpp"

namespace testing_helpers {

using chs::Shape;
using chs::Tensor;
using chs::TensorPtr;

inline std::mt19937_64& rng() {
  static std::mt19937_64 r(20240607);
  return r;
}

inline TensorPtr<double> rand_t(Shape s, double lo = -1, double hi = 1) {
  return chs::random_tensor<double>(std::move(s), rng(), lo, hi);
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline chs::Context<double> context(chs::GradTape<double>* tape, chs::Mode mode = chs::Mode::train) {
  chs::Context<double> ctx;
  ctx.tape = tape;
  ctx.mode = mode;
  return ctx;
}

/// Sets a (1,1,d,d) kernel to the identity and its bias to zero.
inline void set_identity(const chs::Conv2d<double>& conv) {
  auto& w = *conv.weight();
  const std::size_t d = w.dim(2);
  std::fill(w.data().begin(), w.data().end(), 0.0);
  for (std::size_t c = 0; c < d; ++c) w[c * d + c] = 1.0;
  std::fill(conv.bias()->data().begin(), conv.bias()->data().end(), 0.0);
}

/// Gradient check that bounds tensors with an identically-zero analytic
/// gradient in absolute terms (see GradCheckOptions::null_threshold).
inline chs::GradCheckResult split_grad_check(const chs::ScalarFn<double>& f, const std::vector<TensorPtr<double>>& wrt,
                                             chs::GradCheckOptions opt) {
  opt.null_threshold = 1e-13;
  return chs::grad_check<double>(f, wrt, opt);
}

/// Central-difference check for piecewise-smooth graphs (ReLU, max pooling):
/// coordinates with a kink inside the step are skipped and counted.
inline chs::GradCheckResult kink_aware_grad_check(const chs::ScalarFn<double>& f,
                                                  const std::vector<TensorPtr<double>>& wrt, double eps,
                                                  std::size_t coords_per_tensor, unsigned seed,
                                                  double kink_tol = 1e-3, double rel_floor = 1e-8) {
  chs::GradCheckOptions opt;
  opt.rel_floor = rel_floor;
  opt.eps = eps;
  opt.max_coords = coords_per_tensor;
  opt.seed = seed;
  opt.kink_tol = kink_tol;
  opt.null_threshold = 1e-13;
  return chs::grad_check<double>(f, wrt, opt);
}

}  // namespace testing_helpers
