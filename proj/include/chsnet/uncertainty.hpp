#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "chsnet/network.hpp"

namespace chs {

/// Mean mask p over the MC samples and its binary entropy U, both shaped
/// like the model output.
template <typename T>
struct UncertaintyMap {
  Tensor<T> mean;
  Tensor<T> entropy;
};

/// -(p ln p + (1 - p) ln(1 - p)) with 0 ln 0 = 0; lies in [0, ln 2].
inline double binary_entropy(double p) {
  auto term = [](double q) { return q <= 0.0 ? 0.0 : q * std::log(q); };
  return -(term(p) + term(1.0 - p));
}

/// Monte-Carlo dropout: `samples` stochastic forward passes with block
/// dropout at `dropout_rate` (default: the network's rate) and BN running
/// statistics. Uses the final (infection) head.
template <typename T>
UncertaintyMap<T> mc_dropout_uncertainty(const ModelGraph<T>& model, const TensorPtr<T>& image,
                                         std::size_t samples = 20, std::uint64_t seed = 0,
                                         std::optional<double> dropout_rate = std::nullopt) {
  if (samples < 2) throw ConfigError("MC dropout needs at least 2 samples");
  const double rate = dropout_rate.value_or(model.config().dropout_rate);
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
  std::mt19937_64 rng(seed);
  std::vector<double> acc;
  Shape shape;
  for (std::size_t s = 0; s < samples; ++s) {
    Context<T> ctx{nullptr, Mode::sample, &rng, rate};
    auto out = model.forward(ctx, image).infection;
    if (acc.empty()) {
      acc.assign(out->size(), 0.0);
      shape = out->shape();
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>((*out)[i]);
  }
  UncertaintyMap<T> map{Tensor<T>(shape), Tensor<T>(shape)};
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const double p = acc[i] / static_cast<double>(samples);
    map.mean[i] = static_cast<T>(p);
    map.entropy[i] = static_cast<T>(binary_entropy(p));
  }
  return map;
}

}  // namespace chs
