#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "espex/common.hpp"

namespace espex::nn {

// Reverse-mode autodiff on a dynamic DAG of dense row-major tensors.
// Scalar type S is float for training, double for verification.

template <typename S>
struct TensorNode {
  std::vector<long> shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  // Reads this->grad and accumulates into parents' grad.
  std::function<void(TensorNode<S>&)> backward;

  long numel() const { return static_cast<long>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

// RAII scope that disables graph recording (inference / finite differences).
struct NoGrad {
  NoGrad() : prev(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGrad() { detail::grad_mode = prev; }
  bool prev;
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<long> shape) {
    auto n = std::make_shared<TensorNode<S>>();
    long total = 1;
    for (long d : shape) total *= d;
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(total), S(0));
    return Tensor(n);
  }

  static Tensor from(std::vector<long> shape, std::vector<S> values) {
    long total = 1;
    for (long d : shape) total *= d;
    check(total == static_cast<long>(values.size()),
          "tensor: value count does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(n);
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<long>& shape() const { return node_->shape; }
  long dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  long numel() const { return node_->numel(); }

  std::vector<S>& value() { return node_->value; }
  const std::vector<S>& value() const { return node_->value; }
  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg = true) {
    node_->requires_grad = rg;
    return *this;
  }

  S item() const {
    check(numel() == 1, "item: tensor is not scalar");
    return node_->value[0];
  }

  std::shared_ptr<TensorNode<S>>& node() { return node_; }
  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

  // Reverse pass from a scalar root. Grads accumulate (+=) into leaves.
  void backward() const {
    check(numel() == 1, "backward: root must be scalar");
    node_->ensure_grad();
    node_->grad[0] += S(1);

    // Iterative post-order DFS; visit each node once.
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> seen;
    std::vector<std::pair<TensorNode<S>*, size_t>> stack;
    stack.push_back({node_.get(), 0});
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        TensorNode<S>* p = n->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    // order is post-order: parents before children; walk reversed.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

// Wires an op result into the graph. `back` accumulates into parent grads; it
// is attached only when recording and some parent needs gradients.
template <typename S, typename BackFn>
Tensor<S> make_op(std::vector<long> shape, std::vector<S> value,
                  std::vector<Tensor<S>> parents, BackFn&& back) {
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::forward<BackFn>(back);
  }
  return Tensor<S>(n);
}

// A named learnable tensor. Names are hierarchical paths, unique per model.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
class ParamRegistry {
 public:
  Parameter<S>& add(const std::string& name, Tensor<S> t) {
    check(!index_.count(name), "duplicate parameter name: " + name);
    t.set_requires_grad(true);
    params_.push_back(std::make_unique<Parameter<S>>(Parameter<S>{name, std::move(t)}));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  size_t size() const { return params_.size(); }
  Parameter<S>& at(size_t i) { return *params_[i]; }
  const Parameter<S>& at(size_t i) const { return *params_[i]; }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  long total_elements() const {
    long n = 0;
    for (const auto& p : params_) n += p->tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      auto& g = p->tensor.grad();
      std::fill(g.begin(), g.end(), S(0));
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace espex::nn
