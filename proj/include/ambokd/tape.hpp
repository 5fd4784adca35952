#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ambokd/errors.hpp"
#include "ambokd/tensor.hpp"

namespace ambokd {

/// Named parameters with a parallel set of gradient slots. Iteration order is
/// the lexicographic order of names.
class ParamSet {
  template <typename Map>
  static auto& lookup(Map& m, const std::string& name) {
    auto it = m.find(name);
    if (it == m.end()) throw parameter_error("unknown parameter '" + name + "'");
    return it->second;
  }

 public:
  void add(const std::string& name, Tensor value) {
    if (values_.contains(name))
      throw parameter_error("duplicate parameter name '" + name + "'");
    grads_.emplace(name, Tensor(value.shape()));
    values_.emplace(name, std::move(value));
  }

  bool contains(const std::string& name) const { return values_.contains(name); }

  const Tensor& get(const std::string& name) const { return lookup(values_, name); }
  Tensor& get(const std::string& name) { return lookup(values_, name); }
  const Tensor& grad(const std::string& name) const { return lookup(grads_, name); }
  Tensor& grad(const std::string& name) { return lookup(grads_, name); }

  void set(const std::string& name, Tensor value) {
    Tensor& slot = get(name);
    if (slot.shape() != value.shape())
      throw dimension_error("parameter '" + name + "' has shape " +
                            shape_str(slot.shape()) + ", got " +
                            shape_str(value.shape()));
    slot = std::move(value);
  }

  void zero_grads() {
    for (auto& [_, g] : grads_)
      for (double& v : g.data()) v = 0.0;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(values_.size());
    for (const auto& [name, _] : values_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return values_.size(); }
  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : values_) n += v.size();
    return n;
  }

  const std::map<std::string, Tensor>& values() const { return values_; }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.values_ == b.values_;
  }

 private:
  std::map<std::string, Tensor> values_;
  std::map<std::string, Tensor> grads_;
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode recording of tensor operations. Nodes are appended in
/// topological order, so a reverse sweep over ids is a valid backward order.
class Tape {
 public:
  /// Adds the node's output gradient into the gradients of its inputs.
  /// `input_grads[i]` is null when input i does not require a gradient.
  using BackwardFn = std::function<void(const Tape&, const Tensor& out_grad,
                                        std::span<Tensor* const> input_grads)>;

  Var constant(Tensor value) { return push(std::move(value), false, {}, {}); }

  Var variable(Tensor value) { return push(std::move(value), true, {}, {}); }

  /// Leaf bound to a named parameter; see accumulate_grads.
  Var param(const ParamSet& params, const std::string& name) {
    Var v = variable(params.get(name));
    bindings_.emplace_back(name, v.id);
    return v;
  }

  /// Leaf holding a parameter's current value but excluded from
  /// differentiation.
  Var frozen_param(const ParamSet& params, const std::string& name) {
    return constant(params.get(name));
  }

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& in : inputs) {
      if (in.tape != this)
        throw state_error("operation mixes variables from different tapes");
      ids.push_back(in.id);
      needs = needs || nodes_[in.id].requires_grad;
    }
    if (!needs) return push(std::move(value), false, {}, {});
    return push(std::move(value), true, std::move(ids), std::move(backward));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward root w.r.t. v; zeros when unreached.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  /// Backpropagates from a single-element root. Each node is visited at most
  /// once; gradients from fan-out accumulate additively.
  void backward(Var root) {
    if (root.tape != this) throw state_error("backward root belongs to another tape");
    if (value(root).size() != 1)
      throw dimension_error("backward root must be a scalar, got shape " +
                            shape_str(value(root).shape()));
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[root.id].grad = Tensor(nodes_[root.id].value.shape(), 1.0);
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      std::vector<Tensor*> gin(n.inputs.size(), nullptr);
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        Node& in = nodes_[n.inputs[i]];
        if (!in.requires_grad) continue;
        if (in.grad.empty()) in.grad = Tensor(in.value.shape());
        gin[i] = &in.grad;
      }
      n.backward(*this, n.grad, gin);
      ++visited_;
    }
  }

  /// Adds gradients of all bound parameter leaves into the parameter set's
  /// gradient slots.
  void accumulate_grads(ParamSet& params) const {
    for (const auto& [name, id] : bindings_) {
      const Node& n = nodes_[id];
      if (n.grad.empty() || !params.contains(name)) continue;
      Tensor& slot = params.grad(name);
      for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += n.grad[i];
    }
  }

  std::size_t size() const { return nodes_.size(); }
  /// Number of backward functions executed, summed over backward calls.
  std::size_t backward_visits() const { return visited_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Var push(Tensor value, bool requires_grad, std::vector<std::size_t> inputs,
           BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad,
                          std::move(inputs), std::move(backward)});
    return Var{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;  // push_back keeps references to values valid
  std::vector<std::pair<std::string, std::size_t>> bindings_;
  std::size_t visited_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

}  // namespace ambokd
