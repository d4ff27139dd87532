#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "chsnet/config.hpp"
#include "chsnet/data.hpp"
#include "chsnet/losses.hpp"
#include "chsnet/metrics.hpp"
#include "chsnet/network.hpp"
#include "chsnet/optim.hpp"

namespace chs {

/// Raised when the training loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  /// Epochs without validation improvement before stopping; 0 disables.
  std::size_t early_stop_patience = 8;
  std::uint64_t seed = 0;
  Reduction loss_reduction = Reduction::mean;
  std::size_t mc_samples = 20;
  /// Block dropout while training (MC sampling uses the network's rate).
  double dropout_rate = 0.0;
  std::optional<std::size_t> kfold;
  OptimizerKind optimizer = OptimizerKind::adam;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
    if (mc_samples < 2) throw ConfigError("mc_samples must be >= 2");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must lie in [0,1)");
    if (kfold && *kfold < 2) throw ConfigError("kfold must be >= 2");
  }
};

inline void read_train(const KeyValues& kv, TrainConfig& cfg) {
  kv.read("train.epochs", cfg.epochs);
  kv.read("train.batch_size", cfg.batch_size);
  kv.read("train.learning_rate", cfg.learning_rate);
  kv.read("train.early_stop_patience", cfg.early_stop_patience);
  kv.read("train.seed", cfg.seed);
  kv.read("train.mc_samples", cfg.mc_samples);
  kv.read("train.dropout_rate", cfg.dropout_rate);
  std::string s;
  if (kv.has("train.loss_reduction")) {
    kv.read("train.loss_reduction", s);
    if (s == "mean") cfg.loss_reduction = Reduction::mean;
    else if (s == "sum") cfg.loss_reduction = Reduction::sum;
    else throw ConfigError("train.loss_reduction must be mean|sum, got '" + s + "'");
  }
  if (kv.has("train.optimizer")) {
    kv.read("train.optimizer", s);
    if (s == "adam") cfg.optimizer = OptimizerKind::adam;
    else if (s == "sgd") cfg.optimizer = OptimizerKind::sgd;
    else throw ConfigError("train.optimizer must be adam|sgd, got '" + s + "'");
  }
  if (kv.has("train.kfold")) {
    std::size_t k = 0;
    kv.read("train.kfold", k);
    cfg.kfold = k == 0 ? std::nullopt : std::optional<std::size_t>(k);
  }
  cfg.validate();
}

inline void write_train(KeyValues& kv, const TrainConfig& cfg) {
  kv.set("train.epochs", std::to_string(cfg.epochs));
  kv.set("train.batch_size", std::to_string(cfg.batch_size));
  kv.set("train.learning_rate", fmt_real(cfg.learning_rate));
  kv.set("train.early_stop_patience", std::to_string(cfg.early_stop_patience));
  kv.set("train.seed", std::to_string(cfg.seed));
  kv.set("train.mc_samples", std::to_string(cfg.mc_samples));
  kv.set("train.dropout_rate", fmt_real(cfg.dropout_rate));
  kv.set("train.loss_reduction", cfg.loss_reduction == Reduction::mean ? "mean" : "sum");
  kv.set("train.optimizer", cfg.optimizer == OptimizerKind::adam ? "adam" : "sgd");
  kv.set("train.kfold", std::to_string(cfg.kfold.value_or(0)));
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

enum class Target { lung, infection };

/// Stacks one field of the selected samples into an (n, w, h, 1) batch.
template <typename T>
TensorPtr<T> stack(const std::vector<SegmentationSample>& samples, const std::vector<std::size_t>& idx,
                   Tensor<double> SegmentationSample::*field) {
  if (idx.empty()) throw DataError("empty batch");
  const Tensor<double>& first = samples.at(idx[0]).*field;
  const std::size_t plane = first.size();
  auto out = make_tensor<T>({idx.size(), first.dim(0), first.dim(1), 1});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Tensor<double>& t = samples.at(idx[k]).*field;
    if (t.shape() != first.shape()) throw DimensionError("samples in a batch must share one shape");
    for (std::size_t i = 0; i < plane; ++i) (*out)[k * plane + i] = static_cast<T>(t[i]);
  }
  return out;
}

/// Deterministic Fisher-Yates shuffle.
inline void seeded_shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

// ---------------------------------------------------------------------------
// Loss and evaluation
// ---------------------------------------------------------------------------

/// Total training loss: segmentation loss of the infection head, plus that
/// of the lung head for a cascade.
template <typename T>
TensorPtr<T> total_loss(GradTape<T>* tape, const ModelOutputs<T>& out, const Tensor<T>& lung,
                        const Tensor<T>& infection, Reduction reduction) {
  auto loss = segmentation_loss(tape, infection, out.infection, reduction);
  if (out.lung) loss = ops::add(tape, loss, segmentation_loss(tape, lung, out.lung, reduction));
  return loss;
}

struct Evaluation {
  double loss = 0.0;
  MetricsReport lung;  ///< all-zero counts for a single network
  MetricsReport infection;
};

/// Inference-mode loss (mean over batches) and pooled confusion counts.
template <typename T>
Evaluation evaluate(const ModelGraph<T>& model, const std::vector<SegmentationSample>& samples,
                    const std::vector<std::size_t>& idx, std::size_t batch_size = 8,
                    Reduction reduction = Reduction::mean) {
  if (idx.empty()) throw DataError("evaluate: empty split");
  Evaluation ev;
  ev.lung = metrics_from_counts(0, 0, 0, 0);
  ev.infection = ev.lung;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), start + batch_size)));
    auto x = stack<T>(samples, b, &SegmentationSample::image);
    auto yl = stack<T>(samples, b, &SegmentationSample::lung_mask);
    auto yi = stack<T>(samples, b, &SegmentationSample::infection_mask);
    Context<T> ctx{nullptr, Mode::infer};
    auto out = model.forward(ctx, x);
    ev.loss += static_cast<double>(total_loss<T>(nullptr, out, *yl, *yi, reduction)->item());
    ++batches;
    ev.infection = merge(ev.infection, compute_metrics(*yi, *out.infection));
    if (out.lung) ev.lung = merge(ev.lung, compute_metrics(*yl, *out.lung));
  }
  ev.loss /= static_cast<double>(batches);
  return ev;
}

// ---------------------------------------------------------------------------
// History
// ---------------------------------------------------------------------------

struct HistoryRecord {
  std::size_t epoch = 0;
  std::string split;  ///< train | val
  std::string head;   ///< total | lung | infection
  double loss = 0.0;
  std::optional<MetricsReport> metrics;
};

/// One record per line: space-separated key=value pairs, reals printed with
/// 17 significant digits.
inline std::string format_history(const HistoryRecord& r) {
  std::ostringstream os;
  os << "epoch=" << r.epoch << " split=" << r.split << " head=" << r.head << " loss=" << fmt_real(r.loss);
  if (r.metrics) {
    const auto& m = *r.metrics;
    os << " accuracy=" << fmt_real(m.accuracy) << " precision=" << fmt_real(m.precision)
       << " specificity=" << fmt_real(m.specificity) << " recall=" << fmt_real(m.recall)
       << " dice=" << fmt_real(m.dice) << " jaccard=" << fmt_real(m.jaccard) << " tp=" << m.tp << " tn=" << m.tn
       << " fp=" << m.fp << " fn=" << m.fn;
  }
  return os.str();
}

struct TrainResult {
  std::vector<HistoryRecord> history;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
};

using Evaluator = std::function<double(std::size_t epoch)>;

/// Copies of every tensor in the store (parameters and running statistics).
template <typename T>
std::vector<std::vector<T>> snapshot(const ParamStore<T>& store) {
  std::vector<std::vector<T>> out;
  for (const auto& e : store.entries()) out.push_back(e.tensor->storage());
  return out;
}

template <typename T>
void restore(ParamStore<T>& store, const std::vector<std::vector<T>>& snap) {
  for (std::size_t i = 0; i < snap.size(); ++i) store.entries()[i].tensor->storage() = snap[i];
}

struct TrainOptions {
  /// Called after every epoch's history lines are produced.
  std::function<void(const HistoryRecord&)> on_record;
  /// Replaces the validation pass; returns the validation loss. Used to
  /// drive early stopping from a fixed curve in tests.
  Evaluator val_override;
};

/// Minimizes the total loss with Adam (or SGD) over seeded mini-batches.
///
/// Each epoch appends train/val records to the history. Training stops
/// after `epochs` or when the validation loss has not improved for
/// `early_stop_patience` consecutive epochs; the parameters of the best
/// validation epoch are restored at the end.
template <typename T>
TrainResult train(ModelGraph<T>& model, const std::vector<SegmentationSample>& samples,
                  const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& val_idx,
                  const TrainConfig& cfg, const TrainOptions& opt = {}) {
  cfg.validate();
  if (train_idx.empty()) throw DataError("train: empty training split");
  if (val_idx.empty() && !opt.val_override) throw DataError("train: empty validation split");
  Optimizer<T> optim(model.store().trainable(), cfg.learning_rate, cfg.optimizer);
  std::mt19937_64 order_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainResult res;
  std::vector<std::vector<T>> best;
  std::size_t since_best = 0;
  auto emit = [&](HistoryRecord r) {
    if (opt.on_record) opt.on_record(r);
    res.history.push_back(std::move(r));
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    seeded_shuffle(order, order_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    MetricsReport lung_m = metrics_from_counts(0, 0, 0, 0), inf_m = lung_m;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> b(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
      auto x = stack<T>(samples, b, &SegmentationSample::image);
      auto yl = stack<T>(samples, b, &SegmentationSample::lung_mask);
      auto yi = stack<T>(samples, b, &SegmentationSample::infection_mask);
      GradTape<T> tape;
      Context<T> ctx{&tape, Mode::train, &dropout_rng, cfg.dropout_rate};
      auto out = model.forward(ctx, x);
      auto loss = total_loss(&tape, out, *yl, *yi, cfg.loss_reduction);
      const double lv = static_cast<double>(loss->item());
      if (!std::isfinite(lv)) {
        throw TrainingDiverged("loss became " + fmt_real(lv) + " at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batches + 1) + "; try a lower learning rate");
      }
      backward(tape, loss);
      optim.step();
      loss_sum += lv;
      ++batches;
      inf_m = merge(inf_m, compute_metrics(*yi, *out.infection));
      if (out.lung) lung_m = merge(lung_m, compute_metrics(*yl, *out.lung));
    }
    const bool cascade = model.kind() == ModelKind::chs;
    emit({epoch, "train", "total", loss_sum / static_cast<double>(batches), std::nullopt});
    if (cascade) emit({epoch, "train", "lung", 0.0, lung_m});
    emit({epoch, "train", "infection", 0.0, inf_m});

    double val_loss;
    if (opt.val_override) {
      val_loss = opt.val_override(epoch);
      emit({epoch, "val", "total", val_loss, std::nullopt});
    } else {
      const Evaluation ev = evaluate(model, samples, val_idx, cfg.batch_size, cfg.loss_reduction);
      val_loss = ev.loss;
      emit({epoch, "val", "total", val_loss, std::nullopt});
      if (cascade) emit({epoch, "val", "lung", 0.0, ev.lung});
      emit({epoch, "val", "infection", 0.0, ev.infection});
    }
    res.epochs_run = epoch;
    if (val_loss < res.best_val_loss) {
      res.best_val_loss = val_loss;
      res.best_epoch = epoch;
      best = snapshot(model.store());
      since_best = 0;
    } else if (cfg.early_stop_patience > 0 && ++since_best >= cfg.early_stop_patience) {
      res.stopped_early = true;
      break;
    }
  }
  if (!best.empty()) restore(model.store(), best);
  return res;
}

/// k-fold cross-validation over `pool`: fold i validates on every k-th
/// sample starting at i (after a seeded shuffle) and trains a fresh model
/// from `make_model` on the rest.
template <typename T>
std::vector<TrainResult> train_kfold(const std::function<std::unique_ptr<ModelGraph<T>>()>& make_model,
                                     const std::vector<SegmentationSample>& samples, std::vector<std::size_t> pool,
                                     const TrainConfig& cfg) {
  const std::size_t k = cfg.kfold.value_or(5);
  if (k < 2 || pool.size() < k) throw ConfigError("kfold needs k >= 2 and at least k samples");
  std::mt19937_64 rng(cfg.seed);
  seeded_shuffle(pool, rng);
  std::vector<TrainResult> folds;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> tr, va;
    for (std::size_t i = 0; i < pool.size(); ++i) (i % k == f ? va : tr).push_back(pool[i]);
    auto model = make_model();
    folds.push_back(train(*model, samples, tr, va, cfg));
  }
  return folds;
}

}  // namespace chs
