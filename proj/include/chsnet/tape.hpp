#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "chsnet/tensor.hpp"

namespace chs {

/// Ordered record of executed differentiable operations.
///
/// Records are appended as operations run, so the list is already in
/// topological order. Each record keeps its operands alive until the tape is
/// cleared.
template <typename T = double>
class GradTape {
 public:
  struct Record {
    std::string op;
    std::vector<TensorPtr<T>> inputs;
    TensorPtr<T> output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<TensorPtr<T>> inputs, TensorPtr<T> output,
              std::function<void()> backward) {
    records_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  const std::vector<Record>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  void clear() noexcept { records_.clear(); }

 private:
  std::vector<Record> records_;
};

/// True when an op with these operands must be recorded.
template <typename T>
bool needs_grad(const GradTape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

/// Reverse sweep over the tape seeded with d(loss)/d(loss) = 1.
///
/// Every tensor on the tape that requires gradients starts from zero, so
/// parameters touched by the tape but not reachable from `loss` end with an
/// all-zero gradient.
template <typename T>
void backward(GradTape<T>& tape, const TensorPtr<T>& loss) {
  if (!loss || loss->size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss ? shape_str(loss->shape()) : std::string("<null>")));
  }
  for (const auto& rec : tape.records()) {
    for (const auto& in : rec.inputs) {
      if (in && in->requires_grad()) in->zero_grad();
    }
    if (rec.output->requires_grad()) rec.output->zero_grad();
  }
  if (!loss->has_grad()) loss->zero_grad();
  loss->grad()[0] = T(1);
  const auto& recs = tape.records();
  for (auto it = recs.rbegin(); it != recs.rend(); ++it) it->backward();
}

}  // namespace chs
