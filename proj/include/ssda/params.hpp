#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

/// Named model state. Trainable entries take gradients and optimizer updates;
/// buffers (normalization running statistics) are state only. Iteration is in
/// lexicographic name order.
template <class T>
class ParamSet {
 public:
  struct Entry {
    Tensor<T> value;
    bool trainable = true;
    std::vector<T> momentum;  // same element count as value
  };

  void add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(trainable);
    Entry e{std::move(value), trainable, {}};
    e.momentum.assign(e.value.numel(), T(0));
    entries_.emplace(name, std::move(e));
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) { return entry(name).value; }
  const Tensor<T>& at(const std::string& name) const { return entry(name).value; }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) {
      if (e.trainable) n += e.value.numel();
    }
    return n;
  }

  /// Deep copy. With `differentiable == false` no entry requires a gradient,
  /// which keeps the copy out of every differentiation graph.
  ParamSet clone(bool differentiable = true) const {
    ParamSet copy;
    copy.step = step;
    for (const auto& [name, e] : entries_) {
      Entry c{e.value.detach(), e.trainable, e.momentum};
      c.value.set_requires_grad(differentiable && e.trainable);
      copy.entries_.emplace(name, std::move(c));
    }
    return copy;
  }

  void zero_grad() {
    for (auto& [name, e] : entries_) {
      if (e.trainable) e.value.zero_grad();
    }
  }

  std::uint64_t step = 0;

 private:
  std::map<std::string, Entry> entries_;
};

/// Throws IntegrityError unless both sets have the same names and shapes.
template <class T>
void check_compatible(const ParamSet<T>& a, const ParamSet<T>& b) {
  if (a.size() != b.size()) {
    throw IntegrityError("parameter sets differ in size: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  auto ib = b.begin();
  for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.value.shape() != ib->second.value.shape()) {
      throw IntegrityError("parameter mismatch: " + ia->first + shape_string(ia->second.value.shape()) +
                           " vs " + ib->first + shape_string(ib->second.value.shape()));
    }
  }
}

/// Global L2 norm of trainable gradients; rescales them to `max_norm` when
/// larger. Returns the norm before clipping.
template <class T>
double clip_grad_total_norm(ParamSet<T>& params, double max_norm) {
  double ss = 0.0;
  for (auto& [name, e] : params) {
    if (!e.trainable || !e.value.has_grad()) continue;
    for (T g : e.value.grad()) ss += double(g) * g;
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& [name, e] : params) {
      if (!e.trainable || !e.value.has_grad()) continue;
      for (T& g : e.value.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

struct SgdOptions {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// SGD with Nesterov momentum:
///   g <- grad + wd * p;  v <- m * v + g;  p <- p - lr * (g + m * v)
/// Missing gradients count as zero.
template <class T>
void sgd_nesterov_step(ParamSet<T>& params, const SgdOptions& opt) {
  const T lr = static_cast<T>(opt.lr), m = static_cast<T>(opt.momentum), wd = static_cast<T>(opt.weight_decay);
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    auto p = e.value.data();
    const bool has = e.value.has_grad();
    auto grad = e.value.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T g = (has ? grad[i] : T(0)) + wd * p[i];
      e.momentum[i] = m * e.momentum[i] + g;
      p[i] -= lr * (g + m * e.momentum[i]);
    }
  }
  ++params.step;
}

}  // namespace ssda
