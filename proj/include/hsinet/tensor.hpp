#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsinet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes are incompatible with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a configuration value violates a structural constraint
/// (odd window sizes, divisibility of channels by groups or heads, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward or backward pass produces non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thread-local switch that disables graph recording. Inference paths use
/// NoGradGuard so that no backward closures or saved buffers are kept alive.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  // Gradient buffer, allocated on first accumulation. Always value.size()
  // elements once allocated.
  std::vector<T> grad;
  // Number of backward passes that reached this leaf since the last reset.
  std::size_t grad_count = 0;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major array with an optional reverse-mode gradient record.
///
/// A Tensor is a shared handle: copies alias the same storage. Values are
/// treated as immutable once an operation has consumed them; the only
/// in-place writers are the optimizer (parameters) and batch-norm running
/// statistics, both of which go through mutable_data().
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  std::size_t grad_count() const { return node_->grad_count; }
  void zero_grad();

  /// Seeds d(this)/d(this) = 1 and propagates through the recorded graph.
  /// Only valid on single-element tensors.
  void backward() const;

  /// Same storage values, no graph history.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

namespace detail {

/// Builds an op result and, when grad mode is on and any input requires a
/// gradient, wires the backward closure into the graph.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      const std::vector<const Tensor<T>*>& inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  if (GradMode::enabled()) {
    bool any = false;
    for (const auto* in : inputs) {
      if (in != nullptr && in->defined() && in->requires_grad()) any = true;
    }
    if (any) {
      node->requires_grad = true;
      for (const auto* in : inputs) {
        node->parents.push_back(in != nullptr && in->defined() ? in->node() : nullptr);
      }
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(TensorNode<T>&)> backward_fn) {
  return make_result<T>(std::move(shape), std::move(values),
                        std::vector<const Tensor<T>*>(inputs), std::move(backward_fn));
}

/// Gradient buffer of parent i if it participates in backward, else empty.
template <typename T>
std::span<T> parent_grad(TensorNode<T>& out, std::size_t i) {
  auto& p = out.parents[i];
  if (!p || !p->requires_grad) return {};
  return p->grad_buffer();
}

}  // namespace detail
}  // namespace hsinet
