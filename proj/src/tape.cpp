#include <cmath>
#include <string>

#include "mcas/errors.hpp"
#include "mcas/tape.hpp"

namespace mcas {

const Shape& Var::shape() const { return tape_->shape_of(id_); }
std::span<const double> Var::value() const { return tape_->value_of(id_); }
std::size_t Var::size() const { return value().size(); }
bool Var::requires_grad() const { return tape_->needs_grad(id_); }

Var Tape::push(Node node) {
  if (consumed_) throw StateError("tape already consumed by backward; record a new tape");
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(const Tensor& t) {
  Node n;
  n.op = "variable";
  n.shape = t.shape;
  n.own = t.data;
  n.leaf = true;
  n.requires_grad = t.grad_enabled;
  return push(std::move(n));
}

Var Tape::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw DimensionError("constant: shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  Node n;
  n.op = "constant";
  n.shape = std::move(shape);
  n.own = std::move(values);
  n.leaf = true;
  return push(std::move(n));
}

Var Tape::param(Tensor& p) {
  if (p.data.empty()) throw ContractError("param: tensor has no data");
  Node n;
  n.op = "param";
  n.shape = p.shape;
  n.external = p.data.data();
  n.param = &p;
  n.leaf = true;
  n.requires_grad = p.grad_enabled;
  return push(std::move(n));
}

Var Tape::record(const char* op, Shape shape, std::vector<double> value,
                 std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(op, std::move(shape), std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(const char* op, Shape shape, std::vector<double> value, std::span<const Var> inputs,
                 BackwardFn fn) {
  if (numel(shape) != value.size()) {
    throw DimensionError(std::string(op) + ": output shape " + shape_string(shape) + " does not match value size");
  }
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + ": non-finite output");
  }
  bool rg = false;
  for (const Var& in : inputs) {
    if (in.tape_ != this) throw ContractError(std::string(op) + ": operand recorded on a different tape");
    rg = rg || nodes_[in.id_].requires_grad;
  }
  Node n;
  n.op = op;
  n.shape = std::move(shape);
  n.own = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backward = std::move(fn);
  return push(std::move(n));
}

std::span<const double> Tape::value_of(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.external) return {n.external, numel(n.shape)};
  return n.own;
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (consumed_) throw StateError("backward: tape already consumed");
  if (loss.tape_ != this) throw ContractError("backward: loss recorded on a different tape");
  if (numel(nodes_[loss.id_].shape) != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(nodes_[loss.id_].shape));
  }
  consumed_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  nodes_[loss.id_].grad.assign(1, 1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
    n.backward = nullptr;
    if (!n.leaf) {
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }
}

std::span<const double> Tape::grad(Var v) const {
  if (v.tape_ != this) throw ContractError("grad: variable recorded on a different tape");
  return nodes_[v.id_].grad;
}

void Tape::accumulate_param_grads(double scale) const {
  for (const Node& n : nodes_) {
    if (!n.param || n.grad.empty() || !n.param->grad_enabled) continue;
    auto& g = n.param->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * n.grad[i];
  }
}

}  // namespace mcas
