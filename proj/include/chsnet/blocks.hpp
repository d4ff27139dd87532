#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "chsnet/layers.hpp"

namespace chs {

/// Weight counts of a standard f x f convolution (d -> r) and its depthwise
/// separable factorization. Biases are not counted.
struct DscCost {
  std::uint64_t n_dsc = 0;
  std::uint64_t n_sc = 0;
  double ratio = 0.0;
};

inline DscCost dsc_cost_ratio(std::uint64_t f, std::uint64_t d, std::uint64_t r) {
  if (f < 1 || d < 1 || r < 1) throw ConfigError("dsc_cost_ratio needs f, d, r >= 1");
  DscCost c;
  c.n_sc = f * f * d * r;
  c.n_dsc = f * f * d + d * r;
  c.ratio = static_cast<double>(c.n_dsc) / static_cast<double>(c.n_sc);
  return c;
}

/// Parallel 1x1 / 3x3 / 5x5 DSC branches (each BN + ReLU) and a
/// same-resolution pooling branch, concatenated to 4r channels and mixed back
/// to r by a 1x1 convolution with BN + ReLU.
///
/// With hybrid pooling disabled the pooling branch is a 3x3 max pool followed
/// by a plain 1x1 convolution to r channels.
template <typename T>
class InceptionConv {
 public:
  InceptionConv() = default;
  InceptionConv(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t r,
                bool use_hybrid_pool = true)
      : use_hybrid_pool_(use_hybrid_pool) {
    if (r < 4) throw ConfigError("inception convolution needs r >= 4, got " + std::to_string(r));
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t f = 2 * i + 1;
      const std::string b = name + ".dsc" + std::to_string(f);
      dsc_[i] = DepthwiseSeparableConv<T>(store, b, f, d, r, 1, f / 2);
      bn_[i] = BatchNorm<T>(store, b + ".bn", r);
    }
    if (use_hybrid_pool_) {
      pool_ = HybridPool<T>(store, name + ".pool", d, r, Padding::same);
    } else {
      pool_proj_ = Conv2d<T>(store, name + ".pool.proj", 1, d, r);
    }
    mix_ = Conv2d<T>(store, name + ".mix", 1, 4 * r, r);
    mix_bn_ = BatchNorm<T>(store, name + ".mix.bn", r);
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    std::vector<TensorPtr<T>> branches;
    for (std::size_t i = 0; i < 3; ++i) branches.push_back(ops::relu(ctx.tape, bn_[i](ctx, dsc_[i](ctx, x))));
    if (use_hybrid_pool_) {
      branches.push_back(pool_(ctx, x));
    } else {
      branches.push_back(pool_proj_(ctx, max_pool(ctx.tape, x, 3, 1, Padding::same)));
    }
    return ops::relu(ctx.tape, mix_bn_(ctx, mix_(ctx, ops::concat_channels(ctx.tape, branches))));
  }

  const DepthwiseSeparableConv<T>& dsc(std::size_t i) const { return dsc_.at(i); }
  const BatchNorm<T>& branch_bn(std::size_t i) const { return bn_.at(i); }
  const Conv2d<T>& mix() const { return mix_; }
  const BatchNorm<T>& mix_bn() const { return mix_bn_; }

 private:
  bool use_hybrid_pool_ = true;
  std::array<DepthwiseSeparableConv<T>, 3> dsc_;
  std::array<BatchNorm<T>, 3> bn_;
  HybridPool<T> pool_;
  Conv2d<T> pool_proj_;
  Conv2d<T> mix_;
  BatchNorm<T> mix_bn_;
};

/// Two inception convolutions with an additive shortcut (3x3 DSC + BN) from
/// the block input, ReLU after the merge.
template <typename T>
class ResidualInceptionBlock {
 public:
  ResidualInceptionBlock() = default;
  ResidualInceptionBlock(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t d_out,
                         bool use_hybrid_pool = true, bool use_residual = true)
      : use_residual_(use_residual) {
    if (d_out < 4) throw ConfigError("residual inception block needs d' >= 4");
    ic1_ = InceptionConv<T>(store, name + ".ic1", d, d_out, use_hybrid_pool);
    ic2_ = InceptionConv<T>(store, name + ".ic2", d_out, d_out, use_hybrid_pool);
    if (use_residual_) {
      shortcut_ = DepthwiseSeparableConv<T>(store, name + ".shortcut", 3, d, d_out, 1, 1);
      shortcut_bn_ = BatchNorm<T>(store, name + ".shortcut.bn", d_out);
    }
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    auto main = ic2_(ctx, ic1_(ctx, x));
    if (!use_residual_) return ops::relu(ctx.tape, main);
    auto skip = shortcut_bn_(ctx, shortcut_(ctx, x));
    return ops::relu(ctx.tape, ops::add(ctx.tape, main, skip));
  }

  const InceptionConv<T>& ic1() const { return ic1_; }
  const InceptionConv<T>& ic2() const { return ic2_; }

 private:
  bool use_residual_ = true;
  InceptionConv<T> ic1_, ic2_;
  DepthwiseSeparableConv<T> shortcut_;
  BatchNorm<T> shortcut_bn_;
};

/// Baseline U-Net block: (3x3 conv, BN, ReLU) twice.
template <typename T>
class DoubleConv {
 public:
  DoubleConv() = default;
  DoubleConv(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t d_out) {
    conv1_ = Conv2d<T>(store, name + ".conv1", 3, d, d_out, 1, 1);
    bn1_ = BatchNorm<T>(store, name + ".conv1.bn", d_out);
    conv2_ = Conv2d<T>(store, name + ".conv2", 3, d_out, d_out, 1, 1);
    bn2_ = BatchNorm<T>(store, name + ".conv2.bn", d_out);
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    auto h = ops::relu(ctx.tape, bn1_(ctx, conv1_(ctx, x)));
    return ops::relu(ctx.tape, bn2_(ctx, conv2_(ctx, h)));
  }

 private:
  Conv2d<T> conv1_, conv2_;
  BatchNorm<T> bn1_, bn2_;
};

/// Halves the resolution between encoder stages, keeping depth: valid hybrid
/// pooling, or plain 2x2 max pooling when hybrid pooling is disabled.
template <typename T>
class Downsample {
 public:
  Downsample() = default;
  Downsample(ParamStore<T>& store, const std::string& name, std::size_t d, bool use_hybrid_pool = true)
      : use_hybrid_pool_(use_hybrid_pool) {
    if (use_hybrid_pool_) pool_ = HybridPool<T>(store, name, d, d, Padding::valid);
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    const Dims4 in = dims4(*x, "downsample input");
    if (in.w % 2 || in.h % 2) throw ConfigError("downsampling needs even extents, got " + shape_str(x->shape()));
    if (use_hybrid_pool_) return pool_(ctx, x);
    return max_pool(ctx.tape, x, 2, 2, Padding::valid);
  }

  const HybridPool<T>& pool() const { return pool_; }

 private:
  bool use_hybrid_pool_ = true;
  HybridPool<T> pool_;
};

}  // namespace chs
