#pragma once

#include <cstdint>
#include <string>

#include "chsnet/tensor.hpp"

namespace chs {

/// Confusion-matrix counts and the scores derived from them. A score whose
/// denominator is zero is reported as 0 and flagged in `degenerate`.
struct MetricsReport {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  double accuracy = 0, precision = 0, specificity = 0, recall = 0, dice = 0, jaccard = 0;
  double threshold = 0.5;
  bool degenerate = false;

  std::uint64_t total() const { return tp + tn + fp + fn; }
};

namespace detail {

inline double safe_ratio(std::uint64_t num, std::uint64_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

inline MetricsReport metrics_from_counts(std::uint64_t tp, std::uint64_t tn, std::uint64_t fp, std::uint64_t fn,
                                         double threshold = 0.5) {
  MetricsReport m{tp, tn, fp, fn};
  m.threshold = threshold;
  bool& dg = m.degenerate;
  m.accuracy = detail::safe_ratio(tp + tn, tp + tn + fp + fn, dg);
  m.precision = detail::safe_ratio(tp, tp + fp, dg);
  m.specificity = detail::safe_ratio(tn, tn + fp, dg);
  m.recall = detail::safe_ratio(tp, tp + fn, dg);
  m.dice = detail::safe_ratio(2 * tp, 2 * tp + fp + fn, dg);
  m.jaccard = detail::safe_ratio(tp, tp + fp + fn, dg);
  return m;
}

/// Thresholds p (p >= threshold is positive) against the binary target y.
template <typename T>
MetricsReport compute_metrics(const Tensor<T>& y, const Tensor<T>& p, double threshold = 0.5) {
  if (y.shape() != p.shape()) {
    throw DimensionError("compute_metrics: target " + shape_str(y.shape()) + " vs prediction " + shape_str(p.shape()));
  }
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool truth = y[i] > T(0.5);
    const bool pred = static_cast<double>(p[i]) >= threshold;
    tp += truth && pred;
    tn += !truth && !pred;
    fp += !truth && pred;
    fn += truth && !pred;
  }
  return metrics_from_counts(tp, tn, fp, fn, threshold);
}

/// Sums the counts of two reports (e.g. over batches) and rescores.
inline MetricsReport merge(const MetricsReport& a, const MetricsReport& b) {
  return metrics_from_counts(a.tp + b.tp, a.tn + b.tn, a.fp + b.fp, a.fn + b.fn, a.threshold);
}

}  // namespace chs
