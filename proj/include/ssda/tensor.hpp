#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to a graph node. Copying a Tensor aliases the
// same storage; use clone() or detach() for an independent copy. An op result
// records its inputs only when at least one input requires a gradient, so
// values computed purely from non-differentiable tensors (teacher outputs,
// pseudo-targets) never carry graph edges.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "ssda/error.hpp"

namespace ssda {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(const Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != values.size()) {
      throw ConfigError("tensor shape " + shape_string(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  /// A leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  /// Same values, no graph edges, never requires grad.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  /// Deep copy of values preserving requires_grad; no graph edges.
  Tensor clone() const {
    Tensor t(node_->shape, node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T, class Fn>
Tensor<T> make_op(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                  Fn&& backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) node.parents.push_back(in.node());
    }
    node.backward = std::forward<Fn>(backward);
  }
  return out;
}

/// Gradient buffer of an input, or nullptr when the input takes no gradient.
template <class T>
T* grad_of(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return t.node()->ensure_grad().data();
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                      shape_string(b));
  }
}

}  // namespace detail

/// Reverse-mode accumulation from a scalar. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed.
template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order) {
    if (node->backward) {
      node->grad.assign(node->data.size(), T(0));
    } else {
      node->ensure_grad();
    }
  }
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [a, b](const Node<T>& self) {
    for (T* g : {detail::grad_of(a), detail::grad_of(b)}) {
      if (!g) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [a, b](const Node<T>& self) {
    if (T* ga = detail::grad_of(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * b[i];
    }
    if (T* gb = detail::grad_of(b)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * a[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_op<T>(a.shape(), std::move(out), {a}, [a, factor](const Node<T>& self) {
    T* g = detail::grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  return detail::make_op<T>({1}, {total}, {a}, [a](const Node<T>& self) {
    T* g = detail::grad_of(a);
    for (std::size_t i = 0; i < a.numel(); ++i) g[i] += self.grad[0];
  });
}

/// Concatenation along the leading (batch) axis.
template <class T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_batch: no inputs");
  Shape shape = parts.front().shape();
  std::size_t batch = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    Shape want(shape.begin() + 1, shape.end());
    detail::check_same_shape(tail, want, "concat_batch");
    batch += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = batch;
  return detail::make_op<T>(std::move(shape), std::move(out), parts, [parts](const Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      if (T* g = detail::grad_of(p)) {
        for (std::size_t i = 0; i < p.numel(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p.numel();
    }
  });
}

/// Items [begin, end) along the leading axis.
template <class T>
Tensor<T> slice_batch(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.dim(0)) {
    throw ConfigError("slice_batch: range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") outside " + shape_string(a.shape()));
  }
  const std::size_t item = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.data().begin() + begin * item, a.data().begin() + end * item);
  return detail::make_op<T>(std::move(shape), std::move(out), {a},
                            [a, begin, item](const Node<T>& self) {
                              T* g = detail::grad_of(a) + begin * item;
                              for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                            });
}

/// Converts values between precisions; the result is a fresh leaf.
template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(values));
}

}  // namespace ssda
