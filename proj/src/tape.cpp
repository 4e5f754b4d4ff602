#include "dualnorm/tape.hpp"

#include <atomic>

#include "dualnorm/error.hpp"

namespace dualnorm {

namespace {
std::atomic<bool> g_checked{true};
}

void set_checked_mode(bool on) { g_checked = on; }
bool checked_mode() { return g_checked; }

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::shared: return "shared";
    case ParamGroup::norm_bn: return "norm_bn";
    case ParamGroup::norm_spade: return "norm_spade";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (tape == nullptr) throw ContractError("value() on an unbound Var");
  return tape->value(id);
}

const Tape::Node& Tape::node(std::size_t id) const {
  if (id >= nodes_.size()) throw ContractError("node id out of range");
  return nodes_[id];
}
Tape::Node& Tape::node(std::size_t id) {
  if (id >= nodes_.size()) throw ContractError("node id out of range");
  return nodes_[id];
}

Var Tape::constant(Tensor value) { return input(std::move(value), false); }

Var Tape::input(Tensor value, bool requires_grad) {
  if (checked_mode() && !value.all_finite()) throw NumericError("non-finite value in tape input");
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.op = requires_grad ? "input" : "constant";
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Parameter& p) {
  if (checked_mode() && !p.value.all_finite()) {
    throw NumericError("non-finite value in parameter " + p.name);
  }
  Node& n = nodes_.emplace_back();
  n.value = p.value;
  n.requires_grad = true;
  n.source = &p;
  n.op = "param:" + p.name;
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward,
                 const char* op_name) {
  if (checked_mode() && !value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op_name);
  }
  bool rg = false;
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape != this) throw ContractError(std::string(op_name) + ": input from another tape");
    ids.push_back(v.id);
    rg = rg || node(v.id).requires_grad;
  }
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = rg;
  n.inputs = std::move(ids);
  if (rg) n.backward = std::move(backward);
  n.op = op_name;
  return Var{this, nodes_.size() - 1};
}

Var Tape::detach(Var v) { return constant(node(v.id).value); }

const Tensor* Tape::grad(Var v) const {
  const Node& n = node(v.id);
  return n.has_grad ? &n.grad : nullptr;
}

Tensor* Tape::grad_sink(std::size_t id) {
  Node& n = node(id);
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return &n.grad;
}

void Tape::clear_grads() {
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss from another tape");
  const Node& root = node(loss.id);
  if (root.value.size() != 1 || !(root.value.shape() == Shape{1, 1, 1, 1})) {
    throw ContractError("backward: loss must be a 1x1x1x1 scalar, got " +
                        root.value.shape().str());
  }
  clear_grads();
  visits_ = 0;
  if (!root.requires_grad) return;
  grad_sink(loss.id)->fill(1.0f);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backward) {
      ++visits_;
      // Rules may call grad_sink on earlier nodes; this node's grad stays put.
      n.backward(*this, n.grad, n.value);
    }
    if (n.source != nullptr) {
      if (!(n.source->grad.shape() == n.grad.shape())) n.source->grad = Tensor(n.grad.shape());
      n.source->grad.add_inplace(n.grad);
    }
  }
}

}  // namespace dualnorm
