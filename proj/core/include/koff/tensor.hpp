#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace koff {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  // True when this node is a leaf that wants a gradient or depends on one.
  bool tracked = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// A shared handle to a graph node. Copies alias the same storage, like a
// framework tensor; use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T fill);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return from({}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  // Mutating data is only legal on leaves between graph builds (optimizer
  // updates, initialization, loading).
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  // Gradient accumulated by backward(); zeros if none was accumulated.
  std::vector<T> grad() const;
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  T item() const;
  T at(int64_t flat) const { return node_->value[flat]; }

  Tensor clone() const;
  Tensor detach() const { return clone(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// While alive, ops record no backward closures on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable leaf with requires_grad set.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename U, typename T>
Tensor<U> cast(const Tensor<T>& t) {
  std::vector<U> out(t.values().begin(), t.values().end());
  auto r = Tensor<U>::from(t.shape(), std::move(out));
  r.set_requires_grad(t.requires_grad());
  return r;
}

namespace detail {

template <typename T>
bool any_tracked(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs)
    if (t && t->defined() && t->node()->tracked) return true;
  return false;
}

// Builds the result node; attaches parents and the closure when tracked.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(const Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (any_tracked<T>(inputs)) {
    node->tracked = true;
    for (const auto* t : inputs)
      if (t && t->defined() && t->node()->tracked) node->parents.push_back(t->node());
    node->backward_fn = std::move(fn);
  }
  return Tensor<T>(std::move(node));
}

}  // namespace detail

}  // namespace koff
