#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "neft/errors.hpp"

namespace neft {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Shared state behind a Tensor handle. The autograd tape holds these by
/// pointer, so intermediates live exactly as long as something references them.
template <typename Scalar>
struct TensorStorage {
  Shape shape;
  Vector<Scalar> value;
  Vector<Scalar> grad;  // empty when no gradient has been accumulated
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t generation = 0;  // tape generation that produced a non-leaf
};

/// Dense row-major n-dimensional array with an optional gradient slot.
///
/// A Tensor is a cheap handle: copies share storage. Use clone() for a deep
/// copy. Operations never mutate their inputs.
template <typename Scalar>
class Tensor {
 public:
  using Storage = TensorStorage<Scalar>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : storage_(std::make_shared<Storage>()) {
    for (Index extent : shape) {
      if (extent < 0) throw DimensionError("negative extent in shape " + shape_string(shape));
    }
    storage_->value = Vector<Scalar>::Constant(shape_size(shape), fill);
    storage_->shape = std::move(shape);
  }

  static Tensor from_values(Shape shape, std::span<const Scalar> values) {
    if (shape_size(shape) != static_cast<Index>(values.size())) {
      throw DimensionError("shape " + shape_string(shape) + " holds " +
                           std::to_string(shape_size(shape)) + " elements, got " +
                           std::to_string(values.size()));
    }
    Tensor t(std::move(shape));
    std::copy(values.begin(), values.end(), t.storage_->value.data());
    return t;
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values) {
    return from_values(std::move(shape), std::span<const Scalar>(values.begin(), values.size()));
  }

  static Tensor scalar(Scalar v) { return Tensor(Shape{}, v); }

  bool defined() const { return storage_ != nullptr; }

  const Shape& shape() const { return storage_->shape; }
  Index rank() const { return static_cast<Index>(storage_->shape.size()); }
  Index size() const { return storage_->value.size(); }

  /// Extent along `axis`; negative axes count from the back.
  Index dim(Index axis) const {
    const Index r = rank();
    const Index a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw BoundsError("axis " + std::to_string(axis) + " out of range for shape " +
                        shape_string(shape()));
    }
    return storage_->shape[static_cast<std::size_t>(a)];
  }

  Vector<Scalar>& values() { return storage_->value; }
  const Vector<Scalar>& values() const { return storage_->value; }

  std::span<Scalar> data() { return {storage_->value.data(), static_cast<std::size_t>(size())}; }
  std::span<const Scalar> data() const {
    return {storage_->value.data(), static_cast<std::size_t>(size())};
  }

  template <typename... I>
  Scalar& operator()(I... idx) {
    return storage_->value[offset({static_cast<Index>(idx)...})];
  }
  template <typename... I>
  Scalar operator()(I... idx) const {
    return storage_->value[offset({static_cast<Index>(idx)...})];
  }

  Scalar item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape()));
    return storage_->value[0];
  }

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (!storage_->leaf) throw ContractError("requires_grad can only be set on leaf tensors");
    storage_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return storage_->leaf; }

  bool has_grad() const { return storage_->grad.size() == storage_->value.size() && size() > 0; }
  const Vector<Scalar>& grad() const { return storage_->grad; }
  Vector<Scalar>& grad() { return storage_->grad; }

  /// Gradient as a same-shape tensor (zeros if absent).
  Tensor grad_tensor() const {
    Tensor g(shape());
    if (has_grad()) g.values() = storage_->grad;
    return g;
  }

  void zero_grad() { storage_->grad.resize(0); }

  /// Deep copy of values; keeps the requires_grad flag, drops history and gradient.
  Tensor clone() const {
    Tensor t(shape());
    t.storage_->value = storage_->value;
    t.storage_->requires_grad = storage_->requires_grad && storage_->leaf;
    return t;
  }

  /// Deep copy of values with no gradient tracking.
  Tensor detach() const {
    Tensor t(shape());
    t.storage_->value = storage_->value;
    return t;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> t(shape());
    t.values() = storage_->value.template cast<Other>();
    return t;
  }

  const std::shared_ptr<Storage>& storage() const { return storage_; }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    const Shape& s = storage_->shape;
    if (idx.size() != s.size()) {
      throw BoundsError("index rank " + std::to_string(idx.size()) + " for shape " +
                        shape_string(s));
    }
    Index off = 0;
    std::size_t d = 0;
    for (Index i : idx) {
      if (i < 0 || i >= s[d]) {
        throw BoundsError("index " + std::to_string(i) + " out of range on axis " +
                          std::to_string(d) + " of shape " + shape_string(s));
      }
      off = off * s[d] + i;
      ++d;
    }
    return off;
  }

  std::shared_ptr<Storage> storage_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

}  // namespace neft
