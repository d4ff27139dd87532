#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "chsnet/attention.hpp"

namespace chs {

/// What the second cascade stage sees.
enum class Coupling {
  masked_slice,  ///< input slice times the stage-1 lung map (default)
  lung_map,      ///< the stage-1 sigmoid map itself
  stacked,       ///< slice and map as two channels
};

enum class ModelKind {
  raiu,  ///< single encoder-decoder, one head
  chs,   ///< two encoder-decoders in series: lungs, then infection
};

struct NetworkConfig {
  std::size_t stages = 4;
  std::size_t base_filters = 32;
  double depth_growth = 1.5;
  std::size_t input_w = 256;
  std::size_t input_h = 256;
  std::size_t input_channels = 1;
  bool use_rib = true;
  bool use_hybrid_pool = true;
  bool use_ssd = true;
  bool use_residual = true;
  double dropout_rate = 0.5;
  ops::Activation gate_activation = ops::Activation::sigmoid;
  Coupling coupling = Coupling::masked_slice;
  std::uint64_t seed = 0;

  void validate() const {
    if (stages < 2) throw ConfigError("stages must be >= 2, got " + std::to_string(stages));
    if (base_filters < 1) throw ConfigError("base_filters must be >= 1");
    if (!(depth_growth >= 1.0)) throw ConfigError("depth_growth must be >= 1");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    const std::size_t div = std::size_t{1} << stages;
    if (input_w == 0 || input_h == 0 || input_w % div || input_h % div) {
      throw ConfigError("input extents " + std::to_string(input_w) + "x" + std::to_string(input_h) +
                        " must be divisible by 2^stages = " + std::to_string(div));
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must lie in [0,1)");
  }

  /// Filter width at resolution level i (0 = full resolution, `stages` =
  /// bottleneck): base * growth^i rounded to the nearest multiple of 4.
  std::size_t width(std::size_t level) const {
    const double raw = static_cast<double>(base_filters) * std::pow(depth_growth, static_cast<double>(level));
    return std::max<std::size_t>(4, static_cast<std::size_t>(std::llround(raw / 4.0)) * 4);
  }
};

/// Encoder or decoder block: RIB, or a plain double convolution when RIBs are
/// ablated.
template <typename T>
class StageBlock {
 public:
  StageBlock() = default;
  StageBlock(ParamStore<T>& store, const std::string& name, std::size_t d, std::size_t d_out,
             const NetworkConfig& cfg)
      : use_rib_(cfg.use_rib) {
    if (use_rib_) {
      rib_ = ResidualInceptionBlock<T>(store, name + ".rib", d, d_out, cfg.use_hybrid_pool, cfg.use_residual);
    } else {
      plain_ = DoubleConv<T>(store, name + ".double_conv", d, d_out);
    }
  }

  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x) const {
    return block_dropout(ctx, use_rib_ ? rib_(ctx, x) : plain_(ctx, x));
  }

 private:
  bool use_rib_ = true;
  ResidualInceptionBlock<T> rib_;
  DoubleConv<T> plain_;
};

/// Shapes seen during one forward pass, for contract checks.
struct ShapeTrace {
  std::vector<Shape> encoder;  ///< per level, after the stage block
  std::vector<Shape> decoder;  ///< per level, after the stage block
  std::vector<Shape> skip;     ///< per level, refined skip map
  Shape output;
};

/// U-shaped encoder/decoder: `stages` downsamplings between `stages + 1`
/// resolution levels, transposed-conv upsampling, attention (or direct)
/// skips, and a sigmoid 1x1 head.
template <typename T>
class RaiuNet {
 public:
  RaiuNet(ParamStore<T>& store, const std::string& name, const NetworkConfig& cfg, std::size_t in_channels)
      : cfg_(cfg) {
    cfg.validate();
    const std::size_t levels = cfg.stages + 1;
    for (std::size_t i = 0; i < levels; ++i) {
      const std::string lv = name + ".enc" + std::to_string(i);
      if (i > 0) down_.emplace_back(store, name + ".down" + std::to_string(i - 1), cfg.width(i - 1), cfg.use_hybrid_pool);
      encoder_.emplace_back(store, lv, i == 0 ? in_channels : cfg.width(i - 1), cfg.width(i), cfg);
    }
    for (std::size_t k = 0; k < cfg.stages; ++k) {
      const std::size_t i = cfg.stages - 1 - k;
      const std::string lv = name + ".dec" + std::to_string(i);
      up_.emplace_back(store, lv + ".up", cfg.width(i + 1), cfg.width(i));
      if (cfg.use_ssd) skip_.emplace_back(store, lv + ".ssd", cfg.width(i), cfg.width(i + 1), cfg.gate_activation);
      decoder_.emplace_back(store, lv, 2 * cfg.width(i), cfg.width(i), cfg);
    }
    head_ = Conv2d<T>(store, name + ".head", 1, cfg.width(0), 1, 1, 0, family::head);
  }

  /// (n,w,h,c_in) -> (n,w,h,1) sigmoid map.
  TensorPtr<T> operator()(Context<T>& ctx, const TensorPtr<T>& x, ShapeTrace* trace = nullptr) const {
    const Dims4 in = dims4(*x, "network input");
    if (in.w != cfg_.input_w || in.h != cfg_.input_h) {
      throw DimensionError("network expects " + std::to_string(cfg_.input_w) + "x" + std::to_string(cfg_.input_h) +
                           " input, got " + shape_str(x->shape()));
    }
    std::vector<TensorPtr<T>> enc;
    auto h = x;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      if (i > 0) h = down_[i - 1](ctx, h);
      h = encoder_[i](ctx, h);
      enc.push_back(h);
      if (trace) trace->encoder.push_back(h->shape());
    }
    if (trace) {
      trace->decoder.assign(cfg_.stages, {});
      trace->skip.assign(cfg_.stages, {});
    }
    for (std::size_t k = 0; k < decoder_.size(); ++k) {
      const std::size_t i = cfg_.stages - 1 - k;
      auto up = up_[k](ctx, h);
      auto skip = cfg_.use_ssd ? skip_[k](ctx, enc[i], h) : enc[i];
      h = decoder_[k](ctx, ops::concat_channels<T>(ctx.tape, {up, skip}));
      if (trace) {
        trace->skip[i] = skip->shape();
        trace->decoder[i] = h->shape();
      }
    }
    auto out = ops::sigmoid(ctx.tape, head_(ctx, h));
    if (trace) trace->output = out->shape();
    return out;
  }

  const NetworkConfig& config() const { return cfg_; }

 private:
  NetworkConfig cfg_;
  std::vector<Downsample<T>> down_;
  std::vector<StageBlock<T>> encoder_;
  std::vector<TransposedConv<T>> up_;
  std::vector<SsdSkip<T>> skip_;
  std::vector<StageBlock<T>> decoder_;
  Conv2d<T> head_;
};

template <typename T>
struct ModelOutputs {
  TensorPtr<T> lung;       ///< stage-1 map; null for a single network
  TensorPtr<T> infection;  ///< final map
  TensorPtr<T> stage2_input;
};

/// A built network with its parameters: a single RAIU-Net or the two-stage
/// cascade. Owns the parameter store.
template <typename T = double>
class ModelGraph {
 public:
  ModelGraph(const NetworkConfig& cfg, ModelKind kind) : cfg_(cfg), kind_(kind), store_(cfg.seed) {
    cfg.validate();
    if (kind == ModelKind::chs) {
      lung_ = std::make_unique<RaiuNet<T>>(store_, "stage1", cfg, cfg.input_channels);
      const std::size_t c2 = cfg.coupling == Coupling::stacked ? cfg.input_channels + 1 : cfg.input_channels;
      if (cfg.coupling == Coupling::masked_slice && cfg.input_channels != 1) {
        throw ConfigError("masked_slice coupling needs a single-channel input");
      }
      infection_ = std::make_unique<RaiuNet<T>>(store_, "stage2", cfg, cfg.coupling == Coupling::lung_map ? 1 : c2);
    } else {
      infection_ = std::make_unique<RaiuNet<T>>(store_, "net", cfg, cfg.input_channels);
    }
  }

  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;

  /// Optional stage-1 replacement for isolation tests: when set, its output
  /// is used as the lung map instead of the stage-1 network.
  std::function<TensorPtr<T>(const TensorPtr<T>&)> lung_override;

  ModelOutputs<T> forward(Context<T>& ctx, const TensorPtr<T>& batch, ShapeTrace* trace1 = nullptr,
                          ShapeTrace* trace2 = nullptr) const {
    const Dims4 in = dims4(*batch, "batch");
    if (in.w != cfg_.input_w || in.h != cfg_.input_h || in.c != cfg_.input_channels) {
      throw DimensionError("batch " + shape_str(batch->shape()) + " does not match configured input " +
                           std::to_string(cfg_.input_w) + "x" + std::to_string(cfg_.input_h) + "x" +
                           std::to_string(cfg_.input_channels));
    }
    ModelOutputs<T> out;
    if (kind_ == ModelKind::raiu) {
      out.stage2_input = batch;
      out.infection = (*infection_)(ctx, batch, trace1);
      return out;
    }
    out.lung = lung_override ? lung_override(batch) : (*lung_)(ctx, batch, trace1);
    switch (cfg_.coupling) {
      case Coupling::masked_slice: out.stage2_input = ops::mul(ctx.tape, batch, out.lung); break;
      case Coupling::lung_map: out.stage2_input = out.lung; break;
      case Coupling::stacked: out.stage2_input = ops::concat_channels<T>(ctx.tape, {batch, out.lung}); break;
    }
    out.infection = (*infection_)(ctx, out.stage2_input, trace2);
    return out;
  }

  const NetworkConfig& config() const { return cfg_; }
  ModelKind kind() const { return kind_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }

 private:
  NetworkConfig cfg_;
  ModelKind kind_;
  ParamStore<T> store_;
  std::unique_ptr<RaiuNet<T>> lung_;
  std::unique_ptr<RaiuNet<T>> infection_;
};

template <typename T = double>
std::unique_ptr<ModelGraph<T>> build_raiu_net(const NetworkConfig& cfg) {
  return std::make_unique<ModelGraph<T>>(cfg, ModelKind::raiu);
}

template <typename T = double>
std::unique_ptr<ModelGraph<T>> build_chs_net(const NetworkConfig& cfg) {
  return std::make_unique<ModelGraph<T>>(cfg, ModelKind::chs);
}

struct CensusEntry {
  std::string layer;
  std::string family;
  std::uint64_t count = 0;
};

struct ParameterCensus {
  std::vector<CensusEntry> layers;               ///< in construction order
  std::map<std::string, std::uint64_t> by_family;
  std::uint64_t total = 0;
};

/// Trainable parameter counts grouped by layer (name up to the last '.').
template <typename T>
ParameterCensus parameter_census(const ParamStore<T>& store) {
  ParameterCensus c;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    const auto dot = e.name.find_last_of('.');
    const std::string layer = dot == std::string::npos ? e.name : e.name.substr(0, dot);
    const std::uint64_t n = e.tensor->size();
    if (c.layers.empty() || c.layers.back().layer != layer) c.layers.push_back({layer, e.family, 0});
    c.layers.back().count += n;
    c.by_family[e.family] += n;
    c.total += n;
  }
  return c;
}

template <typename T>
ParameterCensus parameter_census(const ModelGraph<T>& model) {
  return parameter_census(model.store());
}

}  // namespace chs
