#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mocha/tensor.hpp"

namespace mocha {

class Tape;

// Handle to a value recorded on a Tape. A default-constructed Var is "none"
// and is used for optional operands such as a missing bias.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  explicit operator bool() const noexcept { return valid(); }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  const Tensor& value() const;
  Shape shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Adds this node's contribution to the gradients of its inputs.
using BackwardFn = std::function<void(Tape& tape, const Tensor& grad_out)>;

// Single-writer record of executed primitives. backward() walks the nodes in
// exact reverse execution order, so a node's gradient is complete before it is read.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  // Records an op output. The node needs a gradient iff any input does; the
  // backward closure is dropped otherwise. Values are checked for finiteness.
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  const Tensor& value(const Var& v) const;
  bool needs_grad(const Var& v) const;

  // Gradient accumulation buffer of a node, zero-initialized on first use.
  Tensor& grad_buffer(const Var& v);
  void accumulate(const Var& v, const Tensor& g);

  // Seeds d(loss)/d(loss) = 1 and propagates. Clears gradients of a previous pass.
  void backward(const Var& loss);

  // Null when no gradient reached the node.
  const Tensor* grad(const Var& v) const;
  Tensor grad_or_zero(const Var& v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<std::string> op_names() const;
  // Node ids whose backward closures ran during the last backward(), in visit order.
  const std::vector<std::size_t>& last_backward_order() const noexcept { return visited_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    std::string op;
    BackwardFn backward;
  };

  void check_owner(const Var& v) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> visited_;
};

}  // namespace mocha
