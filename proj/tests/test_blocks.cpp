#include <gtest/gtest.h>

#include "chsnet/blocks.hpp"
#include "chsnet/grad_check.hpp"
#include "chsnet/network.hpp"
#include "helpers.hpp"

using namespace chs;
using namespace testing_helpers;
using T = double;

TEST(DscCost, CountedRatioEqualsClosedForm) {
  for (std::uint64_t f : {1, 3, 5, 7})
    for (std::uint64_t r = 1; r <= 256; ++r)
      for (std::uint64_t d : {1, 7, 64}) {
        const auto c = dsc_cost_ratio(f, d, r);
        // Integer identity: n_dsc * f^2 * r == n_sc * (f^2 + r).
        EXPECT_EQ(c.n_dsc * f * f * r, c.n_sc * (f * f + r));
        EXPECT_NEAR(c.ratio, 1.0 / double(r) + 1.0 / double(f * f), 1e-12);
      }
}

TEST(DscCost, Examples) {
  EXPECT_NEAR(dsc_cost_ratio(3, 5, 64).ratio, 1.0 / 64 + 1.0 / 9, 1e-15);
  EXPECT_NEAR(dsc_cost_ratio(3, 5, 64).ratio, 0.126736, 1e-6);
  EXPECT_DOUBLE_EQ(dsc_cost_ratio(1, 3, 1).ratio, 2.0);
  EXPECT_NEAR(dsc_cost_ratio(5, 2, 100).ratio, 0.05, 1e-15);
  EXPECT_THROW(dsc_cost_ratio(0, 1, 1), ConfigError);
}

TEST(DepthwiseSeparable, ShapeContract) {
  ParamStore<T> store(1);
  DepthwiseSeparableConv<T> dsc(store, "dsc", 3, 8, 16, 1, 1);
  auto ctx = context(nullptr);
  EXPECT_EQ(dsc(ctx, rand_t({1, 32, 32, 8}))->shape(), (Shape{1, 32, 32, 16}));
}

TEST(DepthwiseSeparable, DeltaAndIdentityReproduceInput) {
  ParamStore<T> store(1);
  DepthwiseSeparableConv<T> dsc(store, "dsc", 3, 4, 4, 1, 1);
  auto& dw = *dsc.depthwise();
  std::fill(dw.data().begin(), dw.data().end(), 0.0);
  for (std::size_t c = 0; c < 4; ++c) dw[(1 * 3 + 1) * 4 + c] = 1.0;  // centered delta
  auto& pw = *dsc.pointwise();
  std::fill(pw.data().begin(), pw.data().end(), 0.0);
  for (std::size_t c = 0; c < 4; ++c) pw[c * 4 + c] = 1.0;
  auto x = rand_t({2, 6, 5, 4});
  auto ctx = context(nullptr);
  EXPECT_EQ(max_abs_diff(*dsc(ctx, x), *x), 0.0);
}

TEST(DepthwiseSeparable, MatchesTwoStageLoopOracle) {
  ParamStore<T> store(3);
  const std::size_t f = 3, d = 3, r = 4, W = 5, H = 5;
  DepthwiseSeparableConv<T> dsc(store, "dsc", f, d, r, 1, 1);
  for (auto& v : dsc.bias()->data()) v = rand_t({1})->item();
  auto x = rand_t({1, W, H, d});
  auto ctx = context(nullptr);
  auto y = dsc(ctx, x);
  const auto& dw = *dsc.depthwise();
  const auto& pw = *dsc.pointwise();
  for (std::size_t ox = 0; ox < W; ++ox)
    for (std::size_t oy = 0; oy < H; ++oy) {
      std::vector<double> mid(d, 0.0);
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t kx = 0; kx < f; ++kx)
          for (std::size_t ky = 0; ky < f; ++ky) {
            const long ix = long(ox + kx) - 1, iy = long(oy + ky) - 1;
            if (ix < 0 || iy < 0 || ix >= long(W) || iy >= long(H)) continue;
            mid[c] += (*x)[(ix * H + iy) * d + c] * dw[(kx * f + ky) * d + c];
          }
      for (std::size_t q = 0; q < r; ++q) {
        double acc = (*dsc.bias())[q];
        for (std::size_t c = 0; c < d; ++c) acc += mid[c] * pw[c * r + q];
        EXPECT_NEAR((*y)[(ox * H + oy) * r + q], acc, 1e-12);
      }
    }
}

TEST(DepthwiseSeparable, MatchesStandardConvForRankOneKernels) {
  // K[kx,ky,c,q] = a[kx,ky,c] * b[c,q] is exactly a depthwise stage followed
  // by a pointwise stage.
  ParamStore<T> store(4);
  DepthwiseSeparableConv<T> dsc(store, "dsc", 3, 2, 3, 1, 1);
  auto k = make_tensor<T>({3, 3, 2, 3});
  for (std::size_t s = 0; s < 9; ++s)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t q = 0; q < 3; ++q)
        (*k)[(s * 2 + c) * 3 + q] = (*dsc.depthwise())[s * 2 + c] * (*dsc.pointwise())[c * 3 + q];
  auto x = rand_t({1, 6, 6, 2});
  auto ctx = context(nullptr);
  EXPECT_LT(max_abs_diff(*dsc(ctx, x), *ops::conv2d<T>(nullptr, x, k, dsc.bias(), 1, 1)), 1e-12);
}

TEST(DepthwiseSeparable, CheaperThanStandardWheneverRatioBelowOne) {
  for (std::size_t f : {1, 3, 5})
    for (std::size_t r : {1, 2, 8, 32}) {
      ParamStore<T> a(0), b(0);
      DepthwiseSeparableConv<T>(a, "dsc", f, 6, r);
      Conv2d<T>(b, "sc", f, 6, r);
      const auto c = dsc_cost_ratio(f, 6, r);
      if (c.ratio < 1.0) EXPECT_LT(parameter_census(a).total, parameter_census(b).total) << f << "," << r;
    }
}

TEST(Census, SingleLayerExamples) {
  ParamStore<T> sc(0);
  Conv2d<T>(sc, "sc", 3, 1, 16, 1, 1);
  EXPECT_EQ(parameter_census(sc).total, 160u);
  ParamStore<T> dsc(0);
  DepthwiseSeparableConv<T>(dsc, "dsc", 3, 8, 16, 1, 1);
  EXPECT_EQ(parameter_census(dsc).total, 216u);
}

TEST(InceptionConv, ShapeContract) {
  ParamStore<T> store(1);
  InceptionConv<T> ic(store, "ic", 32, 48);
  auto ctx = context(nullptr);
  EXPECT_EQ(ic(ctx, rand_t({1, 64, 64, 32}))->shape(), (Shape{1, 64, 64, 48}));
  EXPECT_THROW(InceptionConv<T>(store, "bad", 4, 3), ConfigError);
}

TEST(InceptionConv, ZeroInputGivesShiftPath) {
  // Zero input and zero biases: every branch is zero before BN, so each
  // branch BN emits its shift; the output is then a fixed function of the
  // shift parameters only.
  ParamStore<T> store(2);
  InceptionConv<T> ic(store, "ic", 3, 4);
  for (std::size_t i = 0; i < 3; ++i) (*ic.branch_bn(i).beta())[1] = 0.3;
  auto ctx = context(nullptr, Mode::train);
  auto zero = make_tensor<T>({1, 5, 5, 3});
  auto y = ic(ctx, zero);
  // Every pixel sees the same inputs, so the output is spatially constant.
  for (std::size_t p = 1; p < 25; ++p)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR((*y)[p * 4 + c], (*y)[c], 1e-12);
  // Train-mode BN of a constant map yields beta.
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR((*y)[c], std::max(0.0, (*ic.mix_bn().beta())[c]), 1e-12);
}

TEST(InceptionConv, GradientMatchesFiniteDifferences) {
  for (bool hybrid : {true, false}) {
    ParamStore<T> store(5);
    InceptionConv<T> ic(store, "ic", 4, 4, hybrid);
    auto x = rand_t({1, 8, 8, 4});
    auto probe = rand_t({1, 8, 8, 4});
    std::vector<TensorPtr<T>> wrt{x};
    for (auto& p : store.trainable()) wrt.push_back(p);
    GradCheckOptions opt;
    opt.eps = 1e-6;
    opt.max_coords = 12;
    auto r = split_grad_check(
        [&](GradTape<T>* t) {
          auto ctx = context(t);
          return ops::weighted_sum(t, ic(ctx, x), *probe);
        },
        wrt, opt);
    EXPECT_LT(r.max_rel_error, 1e-4) << "hybrid=" << hybrid;
    EXPECT_LT(r.max_abs_null, 1e-6);
  }
}

TEST(ResidualInceptionBlock, ShapeContract) {
  ParamStore<T> store(1);
  ResidualInceptionBlock<T> rib(store, "rib", 32, 48);
  auto ctx = context(nullptr);
  EXPECT_EQ(rib(ctx, rand_t({1, 64, 64, 32}))->shape(), (Shape{1, 64, 64, 48}));
}

TEST(ResidualInceptionBlock, WithoutResidualEqualsTwoInceptionConvs) {
  ParamStore<T> store(1);
  ResidualInceptionBlock<T> rib(store, "rib", 3, 4, true, false);
  auto x = rand_t({2, 6, 6, 3});
  auto ctx = context(nullptr, Mode::infer);
  auto direct = rib.ic2()(ctx, rib.ic1()(ctx, x));
  EXPECT_EQ(max_abs_diff(*rib(ctx, x), *ops::relu<T>(nullptr, direct)), 0.0);
}

TEST(ResidualInceptionBlock, ShortcutCarriesGradientWhenMainPathIsZero) {
  ParamStore<T> store(1);
  ResidualInceptionBlock<T> rib(store, "rib", 3, 4);
  for (const auto& e : store.entries())
    if (e.name.find(".ic") != std::string::npos && e.trainable) std::fill(e.tensor->data().begin(), e.tensor->data().end(), 0.0);
  auto x = rand_t({1, 6, 6, 3});
  x->set_requires_grad(true);
  GradTape<T> tape;
  auto ctx = context(&tape);
  backward(tape, ops::weighted_sum(&tape, rib(ctx, x), *rand_t({1, 6, 6, 4})));
  double norm = 0;
  for (auto g : x->grad()) norm += std::abs(g);
  EXPECT_GT(norm, 0.0);
}

TEST(ResidualInceptionBlock, GradientMatchesFiniteDifferences) {
  ParamStore<T> store(6);
  ResidualInceptionBlock<T> rib(store, "rib", 3, 4);
  auto x = rand_t({1, 6, 6, 3});
  auto probe = rand_t({1, 6, 6, 4});
  std::vector<TensorPtr<T>> wrt{x};
  for (auto& p : store.trainable()) wrt.push_back(p);
  GradCheckOptions opt;
  opt.eps = 1e-6;
  opt.max_coords = 6;
  auto r = split_grad_check(
      [&](GradTape<T>* t) {
        auto ctx = context(t);
        return ops::weighted_sum(t, rib(ctx, x), *probe);
      },
      wrt, opt);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_LT(r.max_abs_null, 1e-6);
}

TEST(BlocksPreserveExtents, ForEvenSizes) {
  ParamStore<T> store(1);
  InceptionConv<T> ic(store, "ic", 2, 4);
  ResidualInceptionBlock<T> rib(store, "rib", 2, 4);
  auto ctx = context(nullptr);
  for (std::size_t s = 2; s <= 16; s += 2) {
    auto x = rand_t({1, s, s + 2, 2});
    EXPECT_EQ(ic(ctx, x)->shape(), (Shape{1, s, s + 2, 4}));
    EXPECT_EQ(rib(ctx, x)->shape(), (Shape{1, s, s + 2, 4}));
  }
}

TEST(Downsample, HalvesAndDelegatesToValidHybridPool) {
  ParamStore<T> store(1);
  Downsample<T> down(store, "down", 48);
  auto ctx = context(nullptr);
  auto x = rand_t({1, 128, 128, 48});
  auto y = down(ctx, x);
  EXPECT_EQ(y->shape(), (Shape{1, 64, 64, 48}));
  EXPECT_EQ(max_abs_diff(*y, *hybrid_pool<T>(nullptr, x, Padding::valid, down.pool().weight(), down.pool().bias())), 0.0);
  EXPECT_THROW(down(ctx, rand_t({1, 5, 4, 48})), ConfigError);
}

TEST(Downsample, ConstantInputThroughMaxBranchIsExact) {
  ParamStore<T> store(1);
  Downsample<T> down(store, "down", 2, false);
  auto ctx = context(nullptr);
  auto y = down(ctx, make_tensor<T>({1, 4, 4, 2}, 0.625));
  for (std::size_t i = 0; i < y->size(); ++i) EXPECT_EQ((*y)[i], 0.625);
}
