#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "controlvae/kernels.hpp"
#include "controlvae/tape.hpp"

CONTROLVAE_NAMESPACE_BEGIN
namespace ops {

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ConfigError("op on an empty Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape != &t) throw ConfigError("op mixes Vars from different tapes");
  return t;
}

std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

// Broadcast shape of two operands; each dimension must match or be 1.
std::pair<int, int> broadcast_shape(const Tensor& a, const Tensor& b,
                                    const char* op) {
  auto dim = [&](int x, int y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ConfigError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                      " with " + shape_str(b));
  };
  return {dim(a.rows, b.rows), dim(a.cols, b.cols)};
}

inline long bidx(const Tensor& t, int r, int c) {
  return static_cast<long>(t.rows == 1 ? 0 : r) * t.cols + (t.cols == 1 ? 0 : c);
}

// Elementwise binary op with broadcasting. f(a, b) -> value,
// da(a, b) and db(a, b) -> partial derivatives.
template <class F, class DA, class DB>
Var binary(Var a, Var b, const char* name, F f, DA da, DB db) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto [rows, cols] = broadcast_shape(av, bv, name);
  Tensor out(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out(r, c) = f(av.data[bidx(av, r, c)], bv.data[bidx(bv, r, c)]);
  const int ia = a.id, ib = b.id;
  return t.push(std::move(out), {ia, ib},
                [ia, ib, da, db](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& av = tp.value(ia);
                  const Tensor& bv = tp.value(ib);
                  const bool ga = tp.needs_grad(ia), gb = tp.needs_grad(ib);
                  Tensor* gA = ga ? &tp.grad(ia) : nullptr;
                  Tensor* gB = gb ? &tp.grad(ib) : nullptr;
                  for (int r = 0; r < g.rows; ++r) {
                    for (int c = 0; c < g.cols; ++c) {
                      const long ka = bidx(av, r, c), kb = bidx(bv, r, c);
                      const Real x = av.data[ka], y = bv.data[kb], gv = g(r, c);
                      if (gA) gA->data[ka] += gv * da(x, y);
                      if (gB) gB->data[kb] += gv * db(x, y);
                    }
                  }
                },
                name);
}

// Elementwise unary op; d(x, y) is the derivative given input x and output y.
template <class F, class D>
Var unary(Var a, const char* name, F f, D d) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.data.size(); ++i) out.data[i] = f(av.data[i]);
  const int ia = a.id;
  return t.push(std::move(out), {ia},
                [ia, d](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& x = tp.value(ia);
                  const Tensor& y = tp.value(self);
                  Tensor& gx = tp.grad(ia);
                  for (std::size_t i = 0; i < g.data.size(); ++i)
                    gx.data[i] += g.data[i] * d(x.data[i], y.data[i]);
                },
                name);
}

}  // namespace

Var linear(Var x, Var w, Var b) {
  Tape& t = tape_of(x, w);
  if (b.tape != &t) throw ConfigError("linear: bias on a different tape");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.cols != wv.cols) {
    throw ConfigError("linear: input width " + std::to_string(xv.cols) +
                      " does not match weight " + shape_str(wv));
  }
  if (bv.rows != 1 || bv.cols != wv.rows) {
    throw ConfigError("linear: bias " + shape_str(bv) + " does not match weight " +
                      shape_str(wv));
  }
  const int B = xv.rows, in = xv.cols, out = wv.rows;
  Tensor y(B, out);
  kernels::gemm_nt(B, out, in, xv.data.data(), wv.data.data(), y.data.data(), false);
  for (int r = 0; r < B; ++r) {
    Real* yr = y.row_ptr(r);
    for (int c = 0; c < out; ++c) yr[c] += bv.data[c];
  }
  const int ix = x.id, iw = w.id, ib = b.id;
  return t.push(std::move(y), {ix, iw, ib},
                [ix, iw, ib, B, in, out](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  if (tp.needs_grad(ix)) {
                    kernels::gemm_nn(B, in, out, g.data.data(), tp.value(iw).data.data(),
                                     tp.grad(ix).data.data(), true);
                  }
                  if (tp.needs_grad(iw)) {
                    kernels::gemm_tn(out, in, B, g.data.data(), tp.value(ix).data.data(),
                                     tp.grad(iw).data.data(), true);
                  }
                  if (tp.needs_grad(ib)) {
                    Tensor& gb = tp.grad(ib);
                    for (int r = 0; r < B; ++r) {
                      const Real* gr = g.row_ptr(r);
                      for (int c = 0; c < out; ++c) gb.data[c] += gr[c];
                    }
                  }
                },
                "linear");
}

Var matmul(Var x, Var w) {
  Tape& t = tape_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.cols != wv.rows) {
    throw ConfigError("matmul: " + shape_str(xv) + " times " + shape_str(wv));
  }
  const int B = xv.rows, k = xv.cols, n = wv.cols;
  Tensor y(B, n);
  kernels::gemm_nn(B, n, k, xv.data.data(), wv.data.data(), y.data.data(), false);
  const int ix = x.id, iw = w.id;
  return t.push(std::move(y), {ix, iw},
                [ix, iw, B, k, n](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  if (tp.needs_grad(ix)) {
                    kernels::gemm_nt(B, k, n, g.data.data(), tp.value(iw).data.data(),
                                     tp.grad(ix).data.data(), true);
                  }
                  if (tp.needs_grad(iw)) {
                    kernels::gemm_tn(k, n, B, tp.value(ix).data.data(), g.data.data(),
                                     tp.grad(iw).data.data(), true);
                  }
                },
                "matmul");
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](Real x, Real y) { return x + y; },
      [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(1); });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](Real x, Real y) { return x - y; },
      [](Real, Real) { return Real(1); }, [](Real, Real) { return Real(-1); });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](Real x, Real y) { return x * y; },
      [](Real, Real y) { return y; }, [](Real x, Real) { return x; });
}

Var mul_const(Var a, const Tensor& c) { return mul(a, a.tape->constant(c)); }
Var add_const(Var a, const Tensor& c) { return add(a, a.tape->constant(c)); }

Var scale(Var a, Real s) {
  return unary(
      a, "scale", [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

Var add_scalar(Var a, Real s) {
  return unary(
      a, "add_scalar", [s](Real x) { return x + s; },
      [](Real, Real) { return Real(1); });
}

Var elu(Var a) {
  return unary(
      a, "elu", [](Real x) { return x > 0 ? x : std::expm1(x); },
      [](Real x, Real y) { return x > 0 ? Real(1) : y + Real(1); });
}

Var elu_grad(Var a) {
  return unary(
      a, "elu_grad", [](Real x) { return x > 0 ? Real(1) : std::exp(x); },
      [](Real x, Real y) { return x > 0 ? Real(0) : y; });
}

Var relu(Var a) {
  return unary(
      a, "relu", [](Real x) { return x > 0 ? x : Real(0); },
      [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Var tanh(Var a) {
  return unary(
      a, "tanh", [](Real x) { return std::tanh(x); },
      [](Real, Real y) { return Real(1) - y * y; });
}

Var square(Var a) {
  return unary(
      a, "square", [](Real x) { return x * x; },
      [](Real x, Real) { return 2 * x; });
}

Var abs(Var a) {
  return unary(
      a, "abs", [](Real x) { return std::fabs(x); },
      [](Real x, Real) { return x > 0 ? Real(1) : (x < 0 ? Real(-1) : Real(0)); });
}

Var cos(Var a) {
  return unary(
      a, "cos", [](Real x) { return std::cos(x); },
      [](Real x, Real) { return -std::sin(x); });
}

Var sin(Var a) {
  return unary(
      a, "sin", [](Real x) { return std::sin(x); },
      [](Real x, Real) { return std::cos(x); });
}

Var exp(Var a) {
  return unary(
      a, "exp", [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Tensor y(av.rows, av.cols);
  for (int r = 0; r < av.rows; ++r) {
    const Real* x = av.row_ptr(r);
    Real* o = y.row_ptr(r);
    const Real mx = *std::max_element(x, x + av.cols);
    Real s = 0;
    for (int c = 0; c < av.cols; ++c) s += (o[c] = std::exp(x[c] - mx));
    for (int c = 0; c < av.cols; ++c) o[c] /= s;
  }
  const int ia = a.id;
  return t.push(std::move(y), {ia},
                [ia](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& y = tp.value(self);
                  Tensor& gx = tp.grad(ia);
                  for (int r = 0; r < g.rows; ++r) {
                    Real dot = 0;
                    for (int c = 0; c < g.cols; ++c) dot += g(r, c) * y(r, c);
                    for (int c = 0; c < g.cols; ++c) gx(r, c) += y(r, c) * (g(r, c) - dot);
                  }
                },
                "softmax_rows");
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = tape_of(logits);
  const Tensor& lv = logits.value();
  if (static_cast<int>(labels.size()) != lv.rows) {
    throw ConfigError("cross_entropy: label count does not match batch");
  }
  auto probs = std::make_shared<Tensor>(lv.rows, lv.cols);
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  Tensor out(lv.rows, 1);
  for (int r = 0; r < lv.rows; ++r) {
    const int k = (*lab)[r];
    if (k < 0 || k >= lv.cols) throw ConfigError("cross_entropy: label out of range");
    const Real* x = lv.row_ptr(r);
    const Real mx = *std::max_element(x, x + lv.cols);
    double s = 0;
    for (int c = 0; c < lv.cols; ++c) s += std::exp(static_cast<double>(x[c] - mx));
    const double lse = mx + std::log(s);
    for (int c = 0; c < lv.cols; ++c) (*probs)(r, c) = static_cast<Real>(std::exp(x[c] - lse));
    out(r, 0) = static_cast<Real>(lse - x[k]);
  }
  const int il = logits.id;
  return t.push(std::move(out), {il},
                [il, probs, lab](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  Tensor& gx = tp.grad(il);
                  for (int r = 0; r < gx.rows; ++r) {
                    for (int c = 0; c < gx.cols; ++c) {
                      const Real onehot = c == (*lab)[r] ? Real(1) : Real(0);
                      gx(r, c) += g(r, 0) * ((*probs)(r, c) - onehot);
                    }
                  }
                },
                "cross_entropy");
}

Var layer_norm(Var a, Real eps) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Tensor y(av.rows, av.cols);
  auto rstd = std::make_shared<std::vector<Real>>(av.rows);
  kernels::layer_norm_forward(av.rows, av.cols, av.data.data(), eps, y.data.data(),
                              rstd->data());
  const int ia = a.id;
  return t.push(std::move(y), {ia},
                [ia, rstd](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& y = tp.value(self);
                  kernels::layer_norm_backward(g.rows, g.cols, y.data.data(),
                                               rstd->data(), g.data.data(),
                                               tp.grad(ia).data.data());
                },
                "layer_norm");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const int rows = parts[0].rows();
  int cols = 0;
  std::vector<int> ids, offsets;
  for (const Var& p : parts) {
    if (p.tape != &t) throw ConfigError("concat_cols: mixed tapes");
    if (p.rows() != rows) {
      throw ConfigError("concat_cols: row mismatch " + std::to_string(p.rows()) +
                        " vs " + std::to_string(rows));
    }
    ids.push_back(p.id);
    offsets.push_back(cols);
    cols += p.cols();
  }
  Tensor y(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (int r = 0; r < rows; ++r)
      std::copy(pv.row_ptr(r), pv.row_ptr(r) + pv.cols, y.row_ptr(r) + offsets[k]);
  }
  return t.push(std::move(y), std::span<const int>(ids),
                [ids, offsets](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    if (!tp.needs_grad(ids[k])) continue;
                    Tensor& gp = tp.grad(ids[k]);
                    for (int r = 0; r < gp.rows; ++r) {
                      const Real* src = g.row_ptr(r) + offsets[k];
                      Real* dst = gp.row_ptr(r);
                      for (int c = 0; c < gp.cols; ++c) dst[c] += src[c];
                    }
                  }
                },
                "concat_cols");
}

Var concat_cols(Var a, Var b) {
  const Var parts[2] = {a, b};
  return concat_cols(std::span<const Var>(parts, 2));
}

Var slice_cols(Var a, int start, int count) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols) {
    throw ConfigError("slice_cols: range out of bounds for " + shape_str(av));
  }
  Tensor y(av.rows, count);
  for (int r = 0; r < av.rows; ++r)
    std::copy(av.row_ptr(r) + start, av.row_ptr(r) + start + count, y.row_ptr(r));
  const int ia = a.id;
  return t.push(std::move(y), {ia},
                [ia, start, count](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  Tensor& gx = tp.grad(ia);
                  for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < count; ++c) gx(r, start + c) += g(r, c);
                },
                "slice_cols");
}

Var slice_rows(Var a, int start, int count) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  if (start < 0 || count < 0 || start + count > av.rows) {
    throw ConfigError("slice_rows: range out of bounds for " + shape_str(av));
  }
  Tensor y(count, av.cols);
  std::copy(av.row_ptr(start), av.row_ptr(start) + static_cast<long>(count) * av.cols,
            y.data.begin());
  const int ia = a.id;
  return t.push(std::move(y), {ia},
                [ia, start](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  Tensor& gx = tp.grad(ia);
                  Real* dst = gx.row_ptr(start);
                  for (std::size_t i = 0; i < g.data.size(); ++i) dst[i] += g.data[i];
                },
                "slice_rows");
}

Var gather_cols(Var a, std::span<const int> index) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  auto idx = std::make_shared<std::vector<int>>(index.begin(), index.end());
  for (int c : *idx) {
    if (c < 0 || c >= av.cols) throw ConfigError("gather_cols: index out of range");
  }
  const int n = static_cast<int>(idx->size());
  Tensor y(av.rows, n);
  for (int r = 0; r < av.rows; ++r)
    for (int c = 0; c < n; ++c) y(r, c) = av(r, (*idx)[c]);
  const int ia = a.id;
  return t.push(std::move(y), {ia},
                [ia, idx](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  Tensor& gx = tp.grad(ia);
                  for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) gx(r, (*idx)[c]) += g(r, c);
                },
                "gather_cols");
}

Var blend(Var gate, std::span<const Var> terms) {
  Tape& t = tape_of(gate);
  const Tensor& gv = gate.value();
  const int K = gv.cols, B = gv.rows;
  if (static_cast<int>(terms.size()) != K) {
    throw ConfigError("blend: gate width " + std::to_string(K) + " but " +
                      std::to_string(terms.size()) + " terms");
  }
  const int cols = terms[0].cols();
  std::vector<kernels::BlendTerm> bt;
  std::vector<int> ids{gate.id};
  for (const Var& y : terms) {
    const Tensor& yv = y.value();
    if (y.tape != &t) throw ConfigError("blend: mixed tapes");
    if (yv.cols != cols || (yv.rows != B && yv.rows != 1)) {
      throw ConfigError("blend: term shape " + shape_str(yv) + " incompatible with gate " +
                        shape_str(gv));
    }
    bt.push_back({yv.data.data(), yv.rows == 1 ? 0 : cols});
    ids.push_back(y.id);
  }
  Tensor out(B, cols);
  kernels::blend(B, cols, K, gv.data.data(), bt, out.data.data());
  return t.push(std::move(out), std::span<const int>(ids),
                [ids, K, cols](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& gv = tp.value(ids[0]);
                  const int B = g.rows;
                  const bool need_gate = tp.needs_grad(ids[0]);
                  for (int k = 0; k < K; ++k) {
                    const Tensor& yv = tp.value(ids[k + 1]);
                    const bool bc = yv.rows == 1;
                    if (need_gate) {
                      Tensor& gg = tp.grad(ids[0]);
                      for (int r = 0; r < B; ++r) {
                        const Real* yr = yv.row_ptr(bc ? 0 : r);
                        const Real* grr = g.row_ptr(r);
                        Real s = 0;
                        for (int c = 0; c < cols; ++c) s += grr[c] * yr[c];
                        gg(r, k) += s;
                      }
                    }
                    if (tp.needs_grad(ids[k + 1])) {
                      Tensor& gy = tp.grad(ids[k + 1]);
                      for (int r = 0; r < B; ++r) {
                        const Real w = gv(r, k);
                        const Real* grr = g.row_ptr(r);
                        Real* dst = gy.row_ptr(bc ? 0 : r);
                        for (int c = 0; c < cols; ++c) dst[c] += w * grr[c];
                      }
                    }
                  }
                },
                "blend");
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  double s = 0;
  for (Real x : av.data) s += x;
  Tensor y(1, 1, static_cast<Real>(s));
  const int ia = a.id;
  return t.push(std::move(y), {ia},
                [ia](Tape& tp, int self) {
                  const Real g = tp.grad(self).data[0];
                  for (Real& x : tp.grad(ia).data) x += g;
                },
                "sum");
}

Var mean(Var a) {
  const Real n = static_cast<Real>(std::max<std::size_t>(1, a.value().size()));
  return scale(sum(a), Real(1) / n);
}

Var sum_cols(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  Tensor y(av.rows, 1);
  for (int r = 0; r < av.rows; ++r) {
    Real s = 0;
    for (int c = 0; c < av.cols; ++c) s += av(r, c);
    y(r, 0) = s;
  }
  const int ia = a.id;
  return t.push(std::move(y), {ia},
                [ia](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  Tensor& gx = tp.grad(ia);
                  for (int r = 0; r < gx.rows; ++r)
                    for (int c = 0; c < gx.cols; ++c) gx(r, c) += g(r, 0);
                },
                "sum_cols");
}

}  // namespace ops
CONTROLVAE_NAMESPACE_END
