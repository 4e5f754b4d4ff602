#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "dualnorm/tensor.hpp"

namespace dualnorm {

/// Which of the three disjoint parameter sets a learnable tensor belongs to.
enum class ParamGroup {
  shared,      // convolutions and everything outside normalization
  norm_bn,     // BN (or IN/LN/GN) affine parameters
  norm_spade,  // SPADE modulation subnets
};

const char* to_string(ParamGroup g);

/// A learnable tensor together with its accumulated gradient.
struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::shared;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, ParamGroup g, Tensor v)
      : name(std::move(n)), group(g), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor(value.shape()); }
};

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr; }
};

/// Globally toggles NaN/Inf checks at op boundaries. On by default.
void set_checked_mode(bool on);
bool checked_mode();

/// Reverse-mode autodiff tape. Nodes are appended in execution order, so the
/// recording order is already topological.
class Tape {
 public:
  /// Called during backward with the node's output gradient and output value;
  /// accumulates into input gradients through Tape::grad_sink.
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value, bool requires_grad);
  /// Records the current value of p; backward adds into p.grad.
  Var parameter(Parameter& p);
  /// Records an op output. The backward rule is kept only if an input requires grad.
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward,
             const char* op_name);
  /// Fresh constant carrying the same value; no gradient passes through it.
  Var detach(Var v);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule once in reverse.
  void backward(Var loss);
  /// Drops all node gradients (parameter grads are untouched).
  void clear_grads();

  bool requires_grad(Var v) const { return node(v.id).requires_grad; }
  bool requires_grad(std::size_t id) const { return node(id).requires_grad; }
  /// Gradient accumulated at v during the last backward, or nullptr.
  const Tensor* grad(Var v) const;
  /// Zero-initialised gradient buffer for node id, or nullptr if it needs none.
  Tensor* grad_sink(std::size_t id);
  const Tensor& value(std::size_t id) const { return node(id).value; }
  const std::string& op_name(Var v) const { return node(v.id).op; }
  /// Ids of the nodes v was computed from.
  const std::vector<std::size_t>& inputs_of(Var v) const { return node(v.id).inputs; }
  std::size_t size() const { return nodes_.size(); }
  /// Number of node backward rules executed by the last backward call.
  std::size_t last_backward_visits() const { return visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* source = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string op;
  };
  const Node& node(std::size_t id) const;
  Node& node(std::size_t id);

  std::deque<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace dualnorm
