#pragma once

#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "controlvae/tensor.hpp"

CONTROLVAE_NAMESPACE_BEGIN

class Tape;

// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  int rows() const { return value().rows; }
  int cols() const { return value().cols; }
};

// Reverse-mode tape over batched row-major tensors. A tape is built by one
// forward pass, consumed by one backward call, then discarded.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf with no gradient.
  Var constant(Tensor value);
  // Leaf whose gradient is kept and can be read after backward().
  Var leaf(Tensor value);
  // Parameter leaf. Repeated calls with the same parameter return the same
  // node. Frozen or non-trainable parameters become constants that still
  // pass gradients through to the rest of the graph.
  Var param(Parameter& p);

  // Parameters in this set are treated as frozen for the life of the tape.
  void freeze(const ParameterList& params);

  // Records an op. `parents` decides whether the node needs a gradient.
  Var push(Tensor value, std::initializer_list<int> parents, BackwardFn fn,
           const char* op);
  Var push(Tensor value, std::span<const int> parents, BackwardFn fn,
           const char* op);

  const Tensor& value(int id) const;
  const Tensor& value(Var v) const { return value(v.id); }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  // Gradient buffer of a node, allocated on first use.
  Tensor& grad(int id);
  const Tensor& grad(Var v) { return grad(v.id); }
  const char* op_name(int id) const { return nodes_[id].op; }

  // Seeds d(loss)/d(loss) = 1 for a 1x1 loss and runs the recorded backward
  // functions in reverse order. Parameter gradients are added into
  // Parameter::grad. Throws NumericError on the first non-finite gradient.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool grad_allocated = false;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
    const char* op = "";
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::unordered_set<const Parameter*> frozen_;
  bool consumed_ = false;
};

// Differentiable ops. Binary elementwise ops accept a second operand of the
// same shape, a 1xN row (broadcast over rows) or an Bx1 column (broadcast
// over columns).
namespace ops {

Var linear(Var x, Var w, Var b);        // x[B,in] w[out,in] b[1,out]
Var matmul(Var x, Var w);               // x[B,k] w[k,n]
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real s);
Var add_scalar(Var a, Real s);
Var elu(Var a);
Var elu_grad(Var a);                    // elementwise derivative of elu
Var relu(Var a);
Var tanh(Var a);
Var square(Var a);
Var abs(Var a);
Var cos(Var a);
Var sin(Var a);
Var exp(Var a);
Var softmax_rows(Var a);
Var layer_norm(Var a, Real eps);        // per-row, no affine
Var concat_cols(std::span<const Var> parts);
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, int start, int count);
Var slice_rows(Var a, int start, int count);
Var blend(Var gate, std::span<const Var> terms);  // sum_k gate[:,k] * Y_k
Var sum(Var a);                          // -> 1x1
Var mean(Var a);                         // -> 1x1
Var sum_cols(Var a);                     // row sums -> Bx1
Var mul_const(Var a, const Tensor& c);   // a * constant (broadcast like mul)
Var add_const(Var a, const Tensor& c);
// Per-row cross-entropy of softmax(logits) against integer labels -> Bx1.
Var cross_entropy(Var logits, std::span<const int> labels);
// Gathers the columns listed in `index` into a new tensor.
Var gather_cols(Var a, std::span<const int> index);

}  // namespace ops

CONTROLVAE_NAMESPACE_END
