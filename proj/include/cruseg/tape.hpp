#pragma once

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cruseg/tensor.hpp"

namespace cruseg {

/// Records differentiable operations in execution order.
///
/// Ops append an entry only when recording is on and at least one input
/// requires a gradient. Because entries are appended as they execute, the
/// list is already topologically sorted and backward() is a single reverse
/// sweep that runs each entry's rule once.
template <std::floating_point T>
class Tape {
 public:
  struct Entry {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() = default;
  explicit Tape(bool recording) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  /// True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t && *t && t->requires_grad(); });
  }

  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> rule) {
    output.set_requires_grad(true);
    entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(rule)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Seeds d(loss)/d(loss) = 1 and propagates gradients to every recorded
  /// input that requires them. Parameters the loss does not depend on keep
  /// a zero (or absent) gradient.
  void backward(Tensor<T> loss) {
    if (!loss || loss.numel() != 1) {
      throw std::invalid_argument("backward() needs a scalar loss");
    }
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      if (!corrupted_op_.empty() && it->op == corrupted_op_) {
        for (T& g : it->output.grad()) g *= T(1.05);
      }
      it->backward();
    }
  }

  void clear() { entries_.clear(); }

  /// Test hook: scales the incoming gradient of every entry named `op`
  /// during backward(), which breaks that op's chain rule. Used to check
  /// that the finite-difference harness notices a wrong backward rule.
  void corrupt_backward_of(std::string op) { corrupted_op_ = std::move(op); }

 private:
  bool recording_ = true;
  std::vector<Entry> entries_;
  std::string corrupted_op_;
};

}  // namespace cruseg
