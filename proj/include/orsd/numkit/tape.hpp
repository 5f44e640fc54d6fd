#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "orsd/numkit/tensor.hpp"

namespace orsd::numkit {

// Named trainable array. `grad` accumulates across backward passes until the
// optimizer clears it; `velocity` is optimizer state.
struct Parameter {
  std::string name;
  Tensor2D value;
  Tensor2D grad;
  Tensor2D velocity;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor2D v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.rows(), value.cols()),
        velocity(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor2D& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Reverse-mode record. Nodes are appended in evaluation order, so walking them
// backwards is a topological order and each node is visited once.
class Tape {
 public:
  // Receives the tape so the closure can fetch its own output gradient and
  // the gradient buffers of its inputs.
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor2D value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  // Leaf bound to a parameter; backward() adds its gradient into `p.grad`.
  Var param(Parameter& p) {
    nodes_.push_back(Node{p.value, {}, {}, &p, p.trainable});
    return {this, nodes_.size() - 1};
  }

  // Records an op output. `inputs` decides whether the node needs a gradient;
  // `fn` is dropped when none of them do.
  Var record(Tensor2D value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_.at(v.id).needs_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  // Variadic-input variant of record().
  Var record(Tensor2D value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_.at(v.id).needs_grad;
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
    return {this, nodes_.size() - 1};
  }

  const Tensor2D& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node during backward(); nullptr when the node does not
  // need one.
  Tensor2D* grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (!n.needs_grad) return nullptr;
    if (n.grad.size() != n.value.size() || n.grad.rows() != n.value.rows()) {
      n.grad = Tensor2D(n.value.rows(), n.value.cols());
    }
    return &n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw NumericError("backward() needs a scalar loss");
    if (!nodes_.at(loss.id).needs_grad) return;
    (*grad(loss))[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) {
        current_ = i;
        n.backward(*this);
      }
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  // Output gradient of the node whose backward closure is running.
  const Tensor2D& out_grad() const { return nodes_[current_].grad; }

 private:
  struct Node {
    Tensor2D value;
    Tensor2D grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;  // deque: value references stay valid as nodes are added
  std::size_t current_ = 0;
};

inline const Tensor2D& Var::value() const { return tape->value(*this); }

}  // namespace orsd::numkit
