#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "edt/numerics/param_store.hpp"
#include "edt/numerics/tensor.hpp"

namespace edt::ad {

template <class T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Tensor<T>& grad() const { return tape->grad(*this); }
};

/// Linear tape for reverse-mode differentiation. Nodes are appended in
/// evaluation order, so reverse insertion order is a valid topological order.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(const ParamStore<T>* params = nullptr, bool record = true)
      : params_(params), record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(Tensor<T> value, const char* op = "constant") {
    return push(op, std::move(value), {}, nullptr);
  }

  /// Leaf bound to a named parameter of the attached store. Repeated lookups
  /// of the same name return the same node.
  Var<T> param(std::string_view name) {
    if (params_ == nullptr) {
      throw ContractViolation("tape has no parameter store attached");
    }
    std::string key(name);
    if (auto it = param_nodes_.find(key); it != param_nodes_.end()) {
      return Var<T>{this, it->second};
    }
    const Tensor<T>& v = params_->at(key);
    Node node;
    node.op = "param";
    node.value = v;
    node.requires_grad = record_;
    node.param_index = params_->index_of(key);
    nodes_.push_back(std::move(node));
    std::size_t id = nodes_.size() - 1;
    param_nodes_.emplace(std::move(key), id);
    return Var<T>{this, id};
  }

  /// Appends an op result. `backward` may be null for non-differentiable ops.
  Var<T> push(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, Backward backward) {
    if (!value.all_finite()) {
      throw NumericFault(op);
    }
    Node node;
    node.op = op;
    node.value = std::move(value);
    if (record_ && backward) {
      for (std::size_t in : inputs) {
        node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
      }
      if (node.requires_grad) {
        node.inputs = std::move(inputs);
        node.backward = std::move(backward);
      }
    }
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor<T>& grad(Var<T> v) const { return grad(v.id); }
  const Tensor<T>& grad(std::size_t id) const {
    static const Tensor<T> empty;
    const auto& g = nodes_[id].grad;
    return g ? *g : empty;
  }

  /// Gradient accumulator of an input node, zero-initialized on first use.
  Tensor<T>& grad_accumulator(std::size_t id) {
    auto& g = nodes_[id].grad;
    if (!g) g.emplace(nodes_[id].value.shape());
    return *g;
  }

  void backward(Var<T> loss) {
    if (!record_) {
      throw ContractViolation("backward() on a non-recording tape");
    }
    if (nodes_[loss.id].value.size() != 1) {
      throw ContractViolation("backward() requires a scalar loss, got shape " +
                              shape_string(nodes_[loss.id].value.shape()));
    }
    grad_accumulator(loss.id).fill(T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.grad || !node.backward) continue;
      if (!node.grad->all_finite()) {
        throw NumericFault(std::string(node.op) + " (backward)");
      }
      node.backward(*this, i);
    }
  }

  /// Parameter gradients in store order; unused parameters get zeros.
  Gradients<T> param_grads() const {
    Gradients<T> out = params_->zeros_like();
    for (const auto& [name, id] : param_nodes_) {
      const auto& node = nodes_[id];
      if (node.grad) {
        if (!node.grad->all_finite()) throw NumericFault(name + " (gradient)");
        out[*node.param_index].value = *node.grad;
      }
    }
    return out;
  }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
    std::optional<std::size_t> param_index;
  };

  const ParamStore<T>* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_nodes_;
};

}  // namespace edt::ad
