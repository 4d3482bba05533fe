#pragma once

// Dense row-major tensor with tape-free reverse-mode autodiff.
//
// Every Tensor is a handle to a shared Node. Operations that see at least one
// grad-tracked input record their parents and a backward closure on the result
// node; `backward()` walks the resulting DAG once in reverse topological order.
// Gradients persist only on leaves (and on nodes that asked for retain_grad);
// intermediate buffers are released at the end of each pass.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hyseg/errors.hpp"

namespace hyseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct DTypeName;
template <>
struct DTypeName<float> {
  static constexpr const char* value = "f32";
};
template <>
struct DTypeName<double> {
  static constexpr const char* value = "f64";
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool retain = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape.empty()) throw DimensionError("tensor needs at least one dimension");
    if (hyseg::numel(shape) != values.size()) {
      throw DimensionError("shape " + to_string(shape) + " holds " + std::to_string(hyseg::numel(shape)) +
                           " elements but " + std::to_string(values.size()) + " values were given");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = hyseg::numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    const std::size_t n = hyseg::numel(shape);
    return from(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Writable view; only legal on leaves so recorded graphs never observe mutation.
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw ArgumentError(std::string("in-place write to non-leaf tensor produced by ") + node_->op);
    return node_->value;
  }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (numel() != 1) throw ArgumentError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw ArgumentError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient accumulator; all zeros if nothing has been accumulated yet.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(node_->value.size(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }
  void retain_grad() { node_->retain = true; }
  const char* op() const { return node_->op; }

  // Same values, no history.
  Tensor detach() const { return from(shape(), node_->value, false); }
  Tensor clone_leaf(bool requires_grad) const { return from(shape(), node_->value, requires_grad); }

  void backward() const;

  Node<T>& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Creates the output node of an op and wires its history when any input tracks
// gradients and grad mode is on.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs, const char* op,
                      Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const Tensor<T>* in : inputs) track = track || (in->defined() && in->requires_grad());
  }
  if (track) {
    node->requires_grad = true;
    for (const Tensor<T>* in : inputs) node->parents.push_back(in->defined() ? in->node_ptr() : nullptr);
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result_vec(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs, const char* op,
                          std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

// Parent `i` if it participates in backward, else nullptr.
template <typename T>
Node<T>* grad_parent(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  return (p && p->requires_grad) ? p : nullptr;
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ArgumentError("backward() needs a scalar loss, got shape " + to_string(shape()));
  if (!requires_grad()) throw ArgumentError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  }
  node_->grad_buffer()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || !n->backward) continue;
    n->backward(*n);
  }
  for (Node<T>* n : order) {
    if (!n->is_leaf() && !n->retain) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

}  // namespace hyseg
