#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace q4fg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are incompatible; the message names the shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor handle. Copies share storage; use `detach()` for a
/// value copy. Values are treated as immutable once an op has produced them;
/// only leaves (parameters) are written through `mutable_data()`.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl().data.size(); }

  std::span<const T> data() const { return impl().data; }
  std::span<T> mutable_data() { return impl().data; }
  T item() const;

  bool requires_grad() const { return defined() && impl().requires_grad; }
  BasicTensor& set_requires_grad(bool value);

  bool has_grad() const { return defined() && !impl().grad.empty(); }
  std::span<const T> grad() const { return impl().grad; }
  /// Gradient accumulator, allocated as zeros on first use.
  std::span<T> grad_buffer() const;
  void zero_grad() const { impl().grad.clear(); }

  BasicTensor detach() const;
  bool same_storage(const BasicTensor& other) const noexcept { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Storage& impl() const;

  std::shared_ptr<Storage> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& src) {
  std::vector<To> out(src.data().begin(), src.data().end());
  return BasicTensor<To>(src.shape(), std::move(out), src.requires_grad());
}

/// Ordered record of the operations of one forward pass. Nodes are appended
/// in execution order, so reverse iteration is a valid topological order.
template <typename T>
class BasicTape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::vector<BasicTensor<T>> inputs, BasicTensor<T> output, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every reached node exactly once, in
  /// reverse order. The tape is cleared afterwards.
  void backward(const BasicTensor<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() noexcept { nodes_.clear(); }

  /// Tape currently receiving records on this thread, or nullptr.
  static BasicTape* active() noexcept;

 private:
  struct Node {
    std::vector<BasicTensor<T>> inputs;
    BasicTensor<T> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

/// Makes `tape` the active tape for the current thread for the scope lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(BasicTape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  BasicTape<T>* previous_;
};

/// True when an active tape exists and any input participates in gradients.
template <typename T>
bool should_record(std::initializer_list<const BasicTensor<T>*> inputs) {
  if (BasicTape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace q4fg
