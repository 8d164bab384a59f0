#include "controlvae/state_ops.hpp"

#include <cmath>

CONTROLVAE_NAMESPACE_BEGIN

Tensor states_to_tensor(std::span<const SimState> states) {
  Tensor t(static_cast<int>(states.size()), kStateDim);
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto v = states[i].flatten();
    for (int k = 0; k < kStateDim; ++k) t(static_cast<int>(i), k) = static_cast<Real>(v[k]);
  }
  return t;
}

Tensor state_row(const SimState& s) { return states_to_tensor(std::span(&s, 1)); }

SimState tensor_to_state(const Tensor& t, int row) {
  if (t.cols != kStateDim) throw ConfigError("tensor_to_state: expected 30 columns");
  std::array<double, kStateDim> v;
  for (int k = 0; k < kStateDim; ++k) v[k] = t(row, k);
  return SimState::unflatten(v);
}

Tensor actions_to_tensor(std::span<const Action> actions) {
  Tensor t(static_cast<int>(actions.size()), kActionDim);
  for (std::size_t i = 0; i < actions.size(); ++i)
    for (int k = 0; k < kActionDim; ++k) t(static_cast<int>(i), k) = static_cast<Real>(actions[i][k]);
  return t;
}

Action tensor_to_action(const Tensor& t, int row) {
  if (t.cols != kActionDim) throw ConfigError("tensor_to_action: expected 4 columns");
  Action a;
  for (int k = 0; k < kActionDim; ++k) a[k] = t(row, k);
  return a;
}

Tensor locals_to_tensor(std::span<const LocalState> locals) {
  Tensor t(static_cast<int>(locals.size()), kLocalDim);
  for (std::size_t i = 0; i < locals.size(); ++i)
    for (int k = 0; k < kLocalDim; ++k) t(static_cast<int>(i), k) = static_cast<Real>(locals[i][k]);
  return t;
}

namespace {

void check_cols(const Tensor& t, int cols, const char* op) {
  if (t.cols != cols) {
    throw ConfigError(std::string(op) + ": expected " + std::to_string(cols) + " columns, got " +
                      std::to_string(t.cols));
  }
}

void local_row(const Real* s, Real* o) {
  const Real x0 = s[0], y0 = s[1], th0 = s[2];
  const Real c = std::cos(th0), sn = std::sin(th0);
  for (int b = 0; b < kBodies; ++b) {
    const Real* B = s + 6 * b;
    Real* ob = o + 8 * b;
    const Real dx = B[0] - x0, dy = B[1] - y0, rel = B[2] - th0;
    ob[0] = c * dx + sn * dy;
    ob[1] = -sn * dx + c * dy;
    ob[2] = std::cos(rel);
    ob[3] = std::sin(rel);
    ob[4] = c * B[3] + sn * B[4];
    ob[5] = -sn * B[3] + c * B[4];
    ob[6] = B[5];
    ob[7] = B[1];
  }
  o[8 * kBodies] = -sn;
  o[8 * kBodies + 1] = c;
}

}  // namespace

Tensor state_to_local(const Tensor& states) {
  check_cols(states, kStateDim, "state_to_local");
  Tensor out(states.rows, kLocalDim);
  for (int r = 0; r < states.rows; ++r) local_row(states.row_ptr(r), out.row_ptr(r));
  return out;
}

double state_error(const SimState& a, const SimState& b, const StateErrorWeights& w) {
  double e = 0;
  for (int k = 0; k < kBodies; ++k) {
    const BodyState &p = a.body[k], &q = b.body[k];
    const double dq = wrap_angle(p.theta - q.theta);
    e += w.pos * ((p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y)) + w.rot * dq * dq +
         w.vel * ((p.vx - q.vx) * (p.vx - q.vx) + (p.vy - q.vy) * (p.vy - q.vy)) +
         w.ang_vel * (p.omega - q.omega) * (p.omega - q.omega);
  }
  return e;
}

namespace ops {

Var state_to_local(Var states) {
  Tape& t = *states.tape;
  Tensor out = controlvae::state_to_local(states.value());
  const int is = states.id;
  return t.push(std::move(out), {is},
                [is](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& S = tp.value(is);
                  const Tensor& O = tp.value(self);
                  Tensor& gS = tp.grad(is);
                  for (int r = 0; r < S.rows; ++r) {
                    const Real* s = S.row_ptr(r);
                    const Real* o = O.row_ptr(r);
                    const Real* gr = g.row_ptr(r);
                    Real* gs = gS.row_ptr(r);
                    const Real c = std::cos(s[2]), sn = std::sin(s[2]);
                    Real g_th0 = 0, g_x0 = 0, g_y0 = 0;
                    for (int b = 0; b < kBodies; ++b) {
                      const Real* ob = o + 8 * b;
                      const Real* gb = gr + 8 * b;
                      Real* gB = gs + 6 * b;
                      // local position
                      const Real gdx = c * gb[0] - sn * gb[1];
                      const Real gdy = sn * gb[0] + c * gb[1];
                      gB[0] += gdx;
                      gB[1] += gdy + gb[7];
                      g_x0 -= gdx;
                      g_y0 -= gdy;
                      g_th0 += gb[0] * ob[1] - gb[1] * ob[0];
                      // relative angle
                      const Real grel = -gb[2] * ob[3] + gb[3] * ob[2];
                      gB[2] += grel;
                      g_th0 -= grel;
                      // local velocity
                      gB[3] += c * gb[4] - sn * gb[5];
                      gB[4] += sn * gb[4] + c * gb[5];
                      g_th0 += gb[4] * ob[5] - gb[5] * ob[4];
                      gB[5] += gb[6];
                    }
                    const Real* gu = gr + 8 * kBodies;
                    g_th0 += -c * gu[0] - sn * gu[1];
                    gs[0] += g_x0;
                    gs[1] += g_y0;
                    gs[2] += g_th0;
                  }
                },
                "state_to_local");
}

Var integrate_deltas(Var states, Var deltas, Real dt) {
  if (states.tape != deltas.tape) throw ConfigError("integrate_deltas: mixed tapes");
  Tape& t = *states.tape;
  const Tensor& S = states.value();
  const Tensor& D = deltas.value();
  check_cols(S, kStateDim, "integrate_deltas");
  check_cols(D, 3 * kBodies, "integrate_deltas");
  if (S.rows != D.rows) throw ConfigError("integrate_deltas: batch size mismatch");
  Tensor out(S.rows, kStateDim);
  for (int r = 0; r < S.rows; ++r) {
    const Real* s = S.row_ptr(r);
    const Real* d = D.row_ptr(r);
    Real* o = out.row_ptr(r);
    const Real c = std::cos(s[2]), sn = std::sin(s[2]);
    for (int b = 0; b < kBodies; ++b) {
      const Real* B = s + 6 * b;
      const Real* db = d + 3 * b;
      Real* ob = o + 6 * b;
      ob[3] = B[3] + c * db[0] - sn * db[1];
      ob[4] = B[4] + sn * db[0] + c * db[1];
      ob[5] = B[5] + db[2];
      ob[0] = B[0] + dt * ob[3];
      ob[1] = B[1] + dt * ob[4];
      ob[2] = B[2] + dt * ob[5];
    }
  }
  const int is = states.id, id = deltas.id;
  return t.push(std::move(out), {is, id},
                [is, id, dt](Tape& tp, int self) {
                  const Tensor& g = tp.grad(self);
                  const Tensor& S = tp.value(is);
                  const Tensor& D = tp.value(id);
                  const bool need_s = tp.needs_grad(is), need_d = tp.needs_grad(id);
                  Tensor* gS = need_s ? &tp.grad(is) : nullptr;
                  Tensor* gD = need_d ? &tp.grad(id) : nullptr;
                  for (int r = 0; r < S.rows; ++r) {
                    const Real* s = S.row_ptr(r);
                    const Real* d = D.row_ptr(r);
                    const Real* gr = g.row_ptr(r);
                    const Real c = std::cos(s[2]), sn = std::sin(s[2]);
                    Real g_th0 = 0;
                    for (int b = 0; b < kBodies; ++b) {
                      const Real* gb = gr + 6 * b;
                      const Real* db = d + 3 * b;
                      const Real gvx = gb[3] + dt * gb[0];
                      const Real gvy = gb[4] + dt * gb[1];
                      const Real gw = gb[5] + dt * gb[2];
                      if (gS) {
                        Real* gs = gS->row_ptr(r) + 6 * b;
                        gs[0] += gb[0];
                        gs[1] += gb[1];
                        gs[2] += gb[2];
                        gs[3] += gvx;
                        gs[4] += gvy;
                        gs[5] += gw;
                      }
                      g_th0 += gvx * (-sn * db[0] - c * db[1]) + gvy * (c * db[0] - sn * db[1]);
                      if (gD) {
                        Real* gd = gD->row_ptr(r) + 3 * b;
                        gd[0] += c * gvx + sn * gvy;
                        gd[1] += -sn * gvx + c * gvy;
                        gd[2] += gw;
                      }
                    }
                    if (gS) gS->row_ptr(r)[2] += g_th0;
                  }
                },
                "integrate_deltas");
}

Var state_error(Var pred, const Tensor& target, const StateErrorWeights& w) {
  Tape& t = *pred.tape;
  const Tensor& P = pred.value();
  check_cols(P, kStateDim, "state_error");
  if (!P.same_shape(target)) throw ConfigError("state_error: target shape mismatch");
  Tensor diff(P.rows, kStateDim);
  Tensor out(P.rows, 1);
  const Real wk[6] = {Real(w.pos), Real(w.pos), Real(w.rot), Real(w.vel), Real(w.vel),
                      Real(w.ang_vel)};
  for (int r = 0; r < P.rows; ++r) {
    Real e = 0;
    for (int k = 0; k < kStateDim; ++k) {
      Real d = P(r, k) - target(r, k);
      if (k % 6 == 2) d = static_cast<Real>(wrap_angle(d));
      diff(r, k) = d;
      e += wk[k % 6] * d * d;
    }
    out(r, 0) = e;
  }
  const int ip = pred.id;
  return t.push(std::move(out), {ip},
                [ip, diff = std::move(diff), wk0 = wk[0], wk2 = wk[2], wk3 = wk[3],
                 wk5 = wk[5]](Tape& tp, int self) {
                  const Real wk[6] = {wk0, wk0, wk2, wk3, wk3, wk5};
                  const Tensor& g = tp.grad(self);
                  Tensor& gp = tp.grad(ip);
                  for (int r = 0; r < diff.rows; ++r)
                    for (int k = 0; k < kStateDim; ++k)
                      gp(r, k) += g(r, 0) * 2 * wk[k % 6] * diff(r, k);
                },
                "state_error");
}

Var atan2(Var y, Var x) {
  if (y.tape != x.tape) throw ConfigError("atan2: mixed tapes");
  const Tensor& Y = y.value();
  const Tensor& X = x.value();
  if (!Y.same_shape(X)) throw ConfigError("atan2: shape mismatch");
  Tensor out(Y.rows, Y.cols);
  for (std::size_t i = 0; i < Y.data.size(); ++i) out.data[i] = std::atan2(Y.data[i], X.data[i]);
  const int iy = y.id, ix = x.id;
  return y.tape->push(std::move(out), {iy, ix},
                      [iy, ix](Tape& tp, int self) {
                        const Tensor& g = tp.grad(self);
                        const Tensor& Y = tp.value(iy);
                        const Tensor& X = tp.value(ix);
                        const bool ny = tp.needs_grad(iy), nx = tp.needs_grad(ix);
                        for (std::size_t i = 0; i < g.data.size(); ++i) {
                          const Real r2 = X.data[i] * X.data[i] + Y.data[i] * Y.data[i];
                          if (r2 == 0) continue;
                          if (ny) tp.grad(iy).data[i] += g.data[i] * X.data[i] / r2;
                          if (nx) tp.grad(ix).data[i] -= g.data[i] * Y.data[i] / r2;
                        }
                      },
                      "atan2");
}

Var angle_distance(Var a, const Tensor& target) {
  const Tensor& A = a.value();
  const bool bcast = target.rows == 1 && A.rows != 1;
  if (target.cols != A.cols || (!bcast && target.rows != A.rows)) {
    throw ConfigError("angle_distance: target shape mismatch");
  }
  Tensor out(A.rows, A.cols), sign(A.rows, A.cols);
  for (int r = 0; r < A.rows; ++r)
    for (int c = 0; c < A.cols; ++c) {
      const double d = wrap_angle(A(r, c) - target(bcast ? 0 : r, c));
      out(r, c) = static_cast<Real>(std::fabs(d));
      sign(r, c) = d > 0 ? 1 : (d < 0 ? -1 : 0);
    }
  const int ia = a.id;
  return a.tape->push(std::move(out), {ia},
                      [ia, sign = std::move(sign)](Tape& tp, int self) {
                        const Tensor& g = tp.grad(self);
                        Tensor& ga = tp.grad(ia);
                        for (std::size_t i = 0; i < g.data.size(); ++i)
                          ga.data[i] += g.data[i] * sign.data[i];
                      },
                      "angle_distance");
}

Var shortfall(Var x, Real c) { return relu(add_scalar(scale(x, Real(-1)), c)); }

}  // namespace ops

CONTROLVAE_NAMESPACE_END
