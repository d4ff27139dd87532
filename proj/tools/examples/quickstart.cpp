// Train a small cascade on synthetic scans and score it.

#include <cstdio>

#include "chsnet/chsnet.hpp"

int main() {
  using namespace chs;

  SynthOptions so;
  so.n = 40;
  so.size = 32;
  so.seed = 1;
  const auto data = synth_dataset(so);

  const auto split = assign_splits(std::vector<std::string>(data.size(), "synth"), SplitOptions{});
  std::vector<std::size_t> tr, va, te;
  for (std::size_t i = 0; i < split.size(); ++i)
    (split[i] == Split::train ? tr : split[i] == Split::val ? va : te).push_back(i);

  NetworkConfig cfg;
  cfg.stages = 2;
  cfg.base_filters = 8;
  cfg.input_w = cfg.input_h = 32;
  ModelGraph<float> model(cfg, ModelKind::chs);
  std::printf("%llu parameters\n", static_cast<unsigned long long>(parameter_census(model).total));

  TrainConfig tc;
  tc.epochs = 15;
  tc.seed = 1;
  const auto res = train(model, data, tr, va, tc);
  const auto ev = evaluate(model, data, te);
  std::printf("best epoch %zu: lung dice %.3f, infection dice %.3f\n", res.best_epoch, ev.lung.dice,
              ev.infection.dice);
}
