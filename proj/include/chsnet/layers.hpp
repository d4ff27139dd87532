#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "chsnet/ops.hpp"
#include "chsnet/spectral.hpp"

namespace chs {

/// Parameter families used by the census and the ablation purity checks.
namespace family {
inline constexpr const char* conv = "conv";
inline constexpr const char* dsc = "dsc";
inline constexpr const char* bn = "bn";
inline constexpr const char* spectral_mix = "spectral_mix";
inline constexpr const char* attention = "attention";
inline constexpr const char* tconv = "tconv";
inline constexpr const char* head = "head";
inline constexpr const char* buffer = "buffer";
}  // namespace family

template <typename T>
struct NamedTensor {
  std::string name;
  std::string family;
  TensorPtr<T> tensor;
  bool trainable = true;
};

/// Owns every parameter and running-statistics buffer of a model, in
/// creation order. Initialization draws from one seeded stream, so the same
/// seed and construction order give bit-identical weights.
template <typename T = double>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  /// Fan-in scaled normal: N(0, 2 / fan_in).
  TensorPtr<T> he_normal(const std::string& name, const char* fam, Shape shape, std::size_t fan_in) {
    auto t = add(name, fam, std::move(shape), T(0), true);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1))));
    for (auto& v : t->data()) v = static_cast<T>(dist(rng_));
    return t;
  }

  TensorPtr<T> constant(const std::string& name, const char* fam, Shape shape, T value) {
    return add(name, fam, std::move(shape), value, true);
  }

  TensorPtr<T> buffer(const std::string& name, Shape shape, T value) {
    return add(name, family::buffer, std::move(shape), value, false);
  }

  const std::vector<NamedTensor<T>>& entries() const noexcept { return entries_; }

  std::vector<TensorPtr<T>> trainable() const {
    std::vector<TensorPtr<T>> out;
    for (const auto& e : entries_)
      if (e.trainable) out.push_back(e.tensor);
    return out;
  }

  const NamedTensor<T>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor->zero_grad();
  }

 private:
  TensorPtr<T> add(const std::string& name, const char* fam, Shape shape, T value, bool trainable) {
    auto t = make_tensor<T>(std::move(shape), value);
    t->set_requires_grad(trainable);
    entries_.push_back({name, fam, t, trainable});
    return t;
  }

  std::mt19937_64 rng_;
  std::vector<NamedTensor<T>> entries_;
};

enum class Mode { train, infer, sample };

/// Per-forward settings threaded through every layer.
template <typename T = double>
struct Context {
  GradTape<T>* tape = nullptr;
  Mode mode = Mode::infer;
  std::mt19937_64* rng = nullptr;
  /// Dropout after each convolutional block, used in train and sample modes.
  double dropout_rate = 0.0;
  ops::BnOptions bn{};

  ops::BnMode bn_mode() const { return mode == Mode::train ? ops::BnMode::train : ops::BnMode::infer; }
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, std::size_t f, std::size_t d, std::size_t r,
         std::size_t stride = 1, std::size_t pad = 0, const char* fam = family::conv)
      : stride_(stride), pad_(pad) {
    weight_ = store.he_normal(name + ".weight", fam, {f, f, d, r}, f * f * d);
    bias_ = store.constant(name + ".bias", fam, {r}, T(0));
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    return ops::conv2d(ctx.tape, x, weight_, bias_, stride_, pad_);
  }

  const TensorPtr<T>& weight() const { return weight_; }
  const TensorPtr<T>& bias() const { return bias_; }

 private:
  TensorPtr<T> weight_, bias_;
  std::size_t stride_ = 1, pad_ = 0;
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamStore<T>& store, const std::string& name, std::size_t d) {
    gamma_ = store.constant(name + ".gamma", family::bn, {d}, T(1));
    beta_ = store.constant(name + ".beta", family::bn, {d}, T(0));
    mean_ = store.buffer(name + ".running_mean", {d}, T(0));
    var_ = store.buffer(name + ".running_var", {d}, T(1));
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    return ops::batch_norm(ctx.tape, x, gamma_, beta_, *mean_, *var_, ctx.bn_mode(), ctx.bn);
  }

  const TensorPtr<T>& gamma() const { return gamma_; }
  const TensorPtr<T>& beta() const { return beta_; }

 private:
  TensorPtr<T> gamma_, beta_, mean_, var_;
};

/// Depthwise f x f stage followed by a pointwise 1x1 stage mapping d -> r.
/// Only the pointwise stage carries a bias.
template <typename T>
class DepthwiseSeparableConv {
 public:
  DepthwiseSeparableConv() = default;
  DepthwiseSeparableConv(ParamStore<T>& store, const std::string& name, std::size_t f, std::size_t d,
                         std::size_t r, std::size_t stride = 1, std::size_t pad = 0)
      : stride_(stride), pad_(pad) {
    depthwise_ = store.he_normal(name + ".depthwise", family::dsc, {f, f, d}, f * f);
    pointwise_ = store.he_normal(name + ".pointwise", family::dsc, {1, 1, d, r}, d);
    bias_ = store.constant(name + ".bias", family::dsc, {r}, T(0));
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    auto dw = ops::depthwise_conv2d(ctx.tape, x, depthwise_, stride_, pad_);
    return ops::conv2d(ctx.tape, dw, pointwise_, bias_);
  }

  const TensorPtr<T>& depthwise() const { return depthwise_; }
  const TensorPtr<T>& pointwise() const { return pointwise_; }
  const TensorPtr<T>& bias() const { return bias_; }

 private:
  TensorPtr<T> depthwise_, pointwise_, bias_;
  std::size_t stride_ = 1, pad_ = 0;
};

/// Learned hybrid of spectral and max pooling, mixing 2d channels to d_out.
template <typename T>
class HybridPool {
 public:
  HybridPool() = default;
  HybridPool(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t d_out, Padding mode)
      : mode_(mode) {
    weight_ = store.he_normal(name + ".mix.weight", family::spectral_mix, {1, 1, 2 * d, d_out}, 2 * d);
    bias_ = store.constant(name + ".mix.bias", family::spectral_mix, {d_out}, T(0));
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    return hybrid_pool(ctx.tape, x, mode_, weight_, bias_);
  }

  const TensorPtr<T>& weight() const { return weight_; }
  const TensorPtr<T>& bias() const { return bias_; }

 private:
  Padding mode_ = Padding::valid;
  TensorPtr<T> weight_, bias_;
};

/// 2x2 stride-2 transposed convolution (kernel stored as (2,2,out,in)).
template <typename T>
class TransposedConv {
 public:
  TransposedConv() = default;
  TransposedConv(ParamStore<T>& store, const std::string& name, std::size_t d_in, std::size_t d_out,
                 std::size_t stride = 2)
      : stride_(stride) {
    weight_ = store.he_normal(name + ".weight", family::tconv, {2, 2, d_out, d_in}, d_in);
    bias_ = store.constant(name + ".bias", family::tconv, {d_out}, T(0));
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    return ops::transposed_conv2d(ctx.tape, x, weight_, bias_, stride_);
  }

 private:
  TensorPtr<T> weight_, bias_;
  std::size_t stride_ = 2;
};

/// Dropout for the active mode: off in infer, configured rate otherwise.
template <typename T>
TensorPtr<T> block_dropout(Context<T>& ctx, const TensorPtr<T>& x) {
  if (ctx.mode == Mode::infer || ctx.dropout_rate <= 0.0) return x;
  if (ctx.rng == nullptr) throw ContractError("dropout requires an RNG in the forward context");
  return ops::dropout(ctx.tape, x, ctx.dropout_rate, *ctx.rng);
}

}  // namespace chs
