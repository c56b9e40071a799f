#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "neft/tensor.hpp"

namespace neft {

/// Thread-local switch for recording operations onto the tape.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

/// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Ordered record of executed differentiable operations.
///
/// Each thread owns one tape per scalar type. Replaying the recorded rules in
/// reverse accumulates every gradient exactly once. After backward() or
/// clear() the tape is empty and any loss produced before it is stale.
template <typename Scalar>
class Tape {
 public:
  using Storage = TensorStorage<Scalar>;
  using StoragePtr = std::shared_ptr<Storage>;
  /// Backward rule; reads output->grad, accumulates into its captured inputs.
  using Rule = std::function<void(const Storage& output)>;

  static Tape& active();

  /// True when an op over `inputs` must be recorded.
  static bool should_record(std::initializer_list<const Tensor<Scalar>*> inputs) {
    if (!GradMode::enabled()) return false;
    for (const Tensor<Scalar>* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(const Tensor<Scalar>& output, Rule rule) {
    const auto& out = output.storage();
    out->requires_grad = true;
    out->leaf = false;
    out->generation = generation_;
    entries_.push_back({out, std::move(rule)});
  }

  void backward(const Tensor<Scalar>& loss);

  /// Drops every recorded entry and the intermediates they keep alive.
  void clear() {
    entries_.clear();
    ++generation_;
  }

  std::size_t size() const { return entries_.size(); }
  std::uint64_t generation() const { return generation_; }

 private:
  struct Entry {
    StoragePtr output;
    Rule rule;
  };

  std::vector<Entry> entries_;
  std::uint64_t generation_ = 1;
};

/// Gradient buffer of `s`, allocated as zeros on first use.
template <typename Scalar>
Vector<Scalar>& grad_buffer(TensorStorage<Scalar>& s) {
  if (s.grad.size() != s.value.size()) s.grad = Vector<Scalar>::Zero(s.value.size());
  return s.grad;
}

/// Populates gradients on every requires_grad leaf reachable from `loss`.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Tape<Scalar>::active().backward(loss);
}

}  // namespace neft
