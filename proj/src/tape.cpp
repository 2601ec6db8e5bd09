#include "mocha/tape.hpp"

#include "mocha/errors.hpp"

namespace mocha {

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("value() on an empty Var");
  return tape_->value(*this);
}

void Tape::check_owner(const Var& v) const {
  if (!v.valid() || v.tape_ != this || v.id_ >= nodes_.size()) throw UsageError("Var does not belong to this tape");
}

Var Tape::constant(Tensor value) {
  value.check_finite("constant");
  nodes_.push_back(Node{std::move(value), {}, false, "constant", {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  value.check_finite("variable");
  nodes_.push_back(Node{std::move(value), {}, true, "variable", {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (!in.valid()) continue;
    check_owner(in);
    needs = needs || nodes_[in.id_].needs_grad;
  }
  if (!value.all_finite()) throw NumericalError("non-finite output from op '" + std::string(op) + "'");
  nodes_.push_back(Node{std::move(value), {}, needs, std::string(op), needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(const Var& v) const {
  check_owner(v);
  return nodes_[v.id_].value;
}

bool Tape::needs_grad(const Var& v) const {
  check_owner(v);
  return nodes_[v.id_].needs_grad;
}

Tensor& Tape::grad_buffer(const Var& v) {
  check_owner(v);
  Node& n = nodes_[v.id_];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  check_owner(v);
  Node& n = nodes_[v.id_];
  if (!n.needs_grad) return;
  if (g.shape() != n.value.shape()) {
    throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                         shape_str(n.value.shape()) + " for op '" + n.op + "'");
  }
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(const Var& loss) {
  if (!loss.valid() || loss.tape_ != this || loss.id_ >= nodes_.size()) {
    throw UsageError("backward: loss is not recorded on this tape");
  }
  if (nodes_[loss.id_].value.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " + shape_str(nodes_[loss.id_].value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  visited_.clear();
  Node& root = nodes_[loss.id_];
  if (!root.needs_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    visited_.push_back(i);
    // The closure may grow other nodes' buffers but never this vector.
    n.backward(*this, n.grad);
  }
}

const Tensor* Tape::grad(const Var& v) const {
  check_owner(v);
  const Node& n = nodes_[v.id_];
  return n.grad.empty() ? nullptr : &n.grad;
}

Tensor Tape::grad_or_zero(const Var& v) const {
  const Tensor* g = grad(v);
  return g ? *g : Tensor(value(v).shape());
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.push_back(n.op);
  return names;
}

}  // namespace mocha
