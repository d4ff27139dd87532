#pragma once

#include <algorithm>
#include <optional>
#include <string>

#include "chsnet/blocks.hpp"

namespace chs {

/// Optional overrides of an attention gate, used to isolate paths in tests:
/// `force` replaces the computed gate with a constant, `scale` multiplies it.
template <typename T>
struct GateOverride {
  std::optional<T> force;
  T scale = T(1);
};

namespace detail {

template <typename T>
TensorPtr<T> apply_override(GradTape<T>* tape, const TensorPtr<T>& gate, const GateOverride<T>& ov) {
  if (ov.force) return make_tensor<T>(gate->shape(), *ov.force * ov.scale);
  if (ov.scale != T(1)) return ops::scale(tape, gate, ov.scale);
  return gate;
}

}  // namespace detail

/// Spectral depth attention (SDA).
///
/// A_d = ReLU(conv1x1(SCNN(global_spectral_max_pool(F))))        (1,1,p)
/// F_d = ReLU(BN(conv1x1(A_d * F)))                               (m,n,p)
///
/// SCNN is two ReLU 1x1 convolutions with a p -> p/4 -> p bottleneck.
template <typename T>
class SpectralDepthAttention {
 public:
  struct Result {
    TensorPtr<T> output;
    TensorPtr<T> descriptor;
  };

  SpectralDepthAttention() = default;
  SpectralDepthAttention(ParamStore<T>& store, const std::string& name, std::size_t p, std::size_t reduction = 4) {
    const std::size_t q = std::max<std::size_t>(1, p / reduction);
    squeeze_ = Conv2d<T>(store, name + ".scnn1", 1, p, q, 1, 0, family::attention);
    excite_ = Conv2d<T>(store, name + ".scnn2", 1, q, p, 1, 0, family::attention);
    descriptor_ = Conv2d<T>(store, name + ".descriptor", 1, p, p, 1, 0, family::attention);
    mix_ = Conv2d<T>(store, name + ".mix", 1, p, p, 1, 0, family::attention);
    bn_ = BatchNorm<T>(store, name + ".mix.bn", p);
  }

  Result forward(Context<T>& ctx, const TensorPtr<T>& f) const {
    const Dims4 in = dims4(*f, "spectral depth attention input");
    if (in.w < 2 || in.h < 2) throw DimensionError("spectral depth attention needs m,n >= 2");
    auto pooled = global_spectral_max_pool(ctx.tape, f);
    auto h = ops::relu(ctx.tape, squeeze_(ctx, pooled));
    h = ops::relu(ctx.tape, excite_(ctx, h));
    auto a_d = ops::relu(ctx.tape, descriptor_(ctx, h));
    a_d = detail::apply_override(ctx.tape, a_d, gate);
    auto out = ops::relu(ctx.tape, bn_(ctx, mix_(ctx, ops::mul_channels(ctx.tape, f, a_d))));
    return {out, a_d};
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& f) const { return forward(ctx, f).output; }

  const Conv2d<T>& mix() const { return mix_; }
  const BatchNorm<T>& bn() const { return bn_; }

  GateOverride<T> gate;

 private:
  Conv2d<T> squeeze_, excite_, descriptor_, mix_;
  BatchNorm<T> bn_;
};

/// Spectral spatial attention (SSA).
///
/// gamma = ReLU(BN(conv2x2/s2(F_d_prev) + conv1x1(F_l)))          (m,n,p)
/// A_s   = Up2(gate(conv1x1(gamma)))                               (2m,2n,1)
/// F_s   = BN(conv1x1(A_s * F_d_prev))                             (2m,2n,p/2)
template <typename T>
class SpectralSpatialAttention {
 public:
  struct Result {
    TensorPtr<T> output;
    TensorPtr<T> descriptor;
  };

  SpectralSpatialAttention() = default;
  SpectralSpatialAttention(ParamStore<T>& store, const std::string& name, std::size_t p,
                           ops::Activation gate_activation = ops::Activation::sigmoid)
      : p_(p), gate_activation_(gate_activation) {
    if (p < 2 || p % 2) throw ConfigError("spectral spatial attention needs even p >= 2, got " + std::to_string(p));
    down_ = Conv2d<T>(store, name + ".down", 2, p / 2, p, 2, 0, family::attention);
    lateral_ = Conv2d<T>(store, name + ".lateral", 1, p, p, 1, 0, family::attention);
    gamma_bn_ = BatchNorm<T>(store, name + ".gamma.bn", p);
    gate_ = Conv2d<T>(store, name + ".gate", 1, p, 1, 1, 0, family::attention);
    mix_ = Conv2d<T>(store, name + ".mix", 1, p / 2, p / 2, 1, 0, family::attention);
    bn_ = BatchNorm<T>(store, name + ".mix.bn", p / 2);
  }

  Result forward(Context<T>& ctx, const TensorPtr<T>& f_l, const TensorPtr<T>& f_d_prev) const {
    const Dims4 lo = dims4(*f_l, "spatial attention deep input");
    const Dims4 hi = dims4(*f_d_prev, "spatial attention shallow input");
    if (lo.c != p_ || hi.c != p_ / 2 || hi.n != lo.n || hi.w != 2 * lo.w || hi.h != 2 * lo.h) {
      throw DimensionError("spatial attention expects (m,n," + std::to_string(p_) + ") and (2m,2n," +
                           std::to_string(p_ / 2) + "), got " + shape_str(f_l->shape()) + " and " +
                           shape_str(f_d_prev->shape()));
    }
    auto sum = ops::add(ctx.tape, down_(ctx, f_d_prev), lateral_(ctx, f_l));
    auto gamma = ops::relu(ctx.tape, gamma_bn_(ctx, sum));
    auto gate = ops::activation(ctx.tape, gate_(ctx, gamma), gate_activation_);
    auto a_s = detail::apply_override(ctx.tape, ops::upsample_nearest(ctx.tape, gate, 2), gate_override);
    auto out = bn_(ctx, mix_(ctx, ops::mul_pixels(ctx.tape, f_d_prev, a_s)));
    return {out, a_s};
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& f_l, const TensorPtr<T>& f_d_prev) const {
    return forward(ctx, f_l, f_d_prev).output;
  }

  const Conv2d<T>& mix() const { return mix_; }
  const BatchNorm<T>& bn() const { return bn_; }

  GateOverride<T> gate_override;

 private:
  std::size_t p_ = 0;
  ops::Activation gate_activation_ = ops::Activation::sigmoid;
  Conv2d<T> down_, lateral_, gate_, mix_;
  BatchNorm<T> gamma_bn_, bn_;
};

/// Attention-refined skip connection between encoder level l-1 (shallow,
/// (2m,2n,c)) and the decoder context at level l ((m,n,c_ctx)).
///
/// The shallow map goes through SDA; the context is brought to depth 2c by a
/// 1x1 convolution when it differs; SSA combines both into a (2m,2n,c) map.
template <typename T>
class SsdSkip {
 public:
  struct Result {
    TensorPtr<T> output;
    TensorPtr<T> depth_descriptor;
    TensorPtr<T> spatial_descriptor;
  };

  SsdSkip() = default;
  SsdSkip(ParamStore<T>& store, const std::string& name, std::size_t enc_c, std::size_t ctx_c,
          ops::Activation gate_activation = ops::Activation::sigmoid)
      : enc_c_(enc_c), ctx_c_(ctx_c) {
    sda_ = SpectralDepthAttention<T>(store, name + ".sda", enc_c);
    if (ctx_c != 2 * enc_c) reconcile_ = Conv2d<T>(store, name + ".reconcile", 1, ctx_c, 2 * enc_c, 1, 0, family::attention);
    ssa_ = SpectralSpatialAttention<T>(store, name + ".ssa", 2 * enc_c, gate_activation);
  }

  Result forward(Context<T>& ctx, const TensorPtr<T>& encoder_map, const TensorPtr<T>& decoder_context) const {
    const Dims4 e = dims4(*encoder_map, "skip encoder map");
    const Dims4 c = dims4(*decoder_context, "skip decoder context");
    if (e.c != enc_c_ || c.c != ctx_c_ || c.n != e.n || 2 * c.w != e.w || 2 * c.h != e.h) {
      throw DimensionError("ssd skip cannot reconcile encoder " + shape_str(encoder_map->shape()) +
                           " with decoder context " + shape_str(decoder_context->shape()));
    }
    auto depth = sda_.forward(ctx, encoder_map);
    auto context = ctx_c_ == 2 * enc_c_ ? decoder_context : reconcile_(ctx, decoder_context);
    auto spatial = ssa_.forward(ctx, context, depth.output);
    return {spatial.output, depth.descriptor, spatial.descriptor};
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& encoder_map,
                          const TensorPtr<T>& decoder_context) const {
    return forward(ctx, encoder_map, decoder_context).output;
  }

  SpectralDepthAttention<T>& sda() { return sda_; }
  SpectralSpatialAttention<T>& ssa() { return ssa_; }

 private:
  std::size_t enc_c_ = 0, ctx_c_ = 0;
  SpectralDepthAttention<T> sda_;
  Conv2d<T> reconcile_;
  SpectralSpatialAttention<T> ssa_;
};

}  // namespace chs
