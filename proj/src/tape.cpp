#include "controlvae/tape.hpp"

#include <cmath>
#include <sstream>

CONTROLVAE_NAMESPACE_BEGIN

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  Node& n = nodes_.emplace_back();
  n.owned = std::move(value);
  n.op = "constant";
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value) {
  Node& n = nodes_.emplace_back();
  n.owned = std::move(value);
  n.needs_grad = true;
  n.op = "leaf";
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return {this, it->second};
  Node& n = nodes_.emplace_back();
  n.external = &p.value;
  n.op = "parameter";
  if (p.trainable && !frozen_.contains(&p)) {
    n.needs_grad = true;
    n.param = &p;
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.rows, p.value.cols);
  }
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return {this, id};
}

void Tape::freeze(const ParameterList& params) {
  for (const Parameter* p : params) {
    if (param_nodes_.contains(p)) {
      throw ConfigError("Tape::freeze: parameter '" + p->name +
                        "' was already recorded");
    }
    frozen_.insert(p);
  }
}

Var Tape::push(Tensor value, std::initializer_list<int> parents, BackwardFn fn,
               const char* op) {
  return push(std::move(value), std::span<const int>(parents.begin(), parents.size()),
              std::move(fn), op);
}

Var Tape::push(Tensor value, std::span<const int> parents, BackwardFn fn,
               const char* op) {
  bool needs = false;
  for (int p : parents) needs = needs || nodes_[p].needs_grad;
  Node& n = nodes_.emplace_back();
  n.owned = std::move(value);
  n.needs_grad = needs;
  if (needs) n.backward = std::move(fn);
  n.op = op;
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (!n.grad_allocated) {
    const Tensor& v = value(id);
    n.grad = Tensor(v.rows, v.cols);
    n.grad_allocated = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ConfigError("backward: loss is not on this tape");
  if (consumed_) throw ConfigError("backward: tape already consumed");
  const Tensor& lv = value(loss.id);
  if (lv.rows != 1 || lv.cols != 1) {
    throw ConfigError("backward: loss must be a 1x1 scalar");
  }
  if (!std::isfinite(lv.data[0])) {
    throw NumericError("backward: loss is not finite (node " +
                       std::to_string(loss.id) + ")");
  }
  consumed_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  grad(loss.id).data[0] = Real(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.grad_allocated) continue;
    if (!n.grad.all_finite()) {
      std::ostringstream os;
      os << "non-finite gradient at node " << id << " (" << n.op << ")";
      throw NumericError(os.str());
    }
    if (n.param) {
      Tensor& pg = n.param->grad;
      for (std::size_t i = 0; i < pg.data.size(); ++i) pg.data[i] += n.grad.data[i];
    }
    if (n.backward) n.backward(*this, id);
  }
}

CONTROLVAE_NAMESPACE_END
