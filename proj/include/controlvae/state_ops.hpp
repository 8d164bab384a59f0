#pragma once

#include <span>
#include <vector>

#include "controlvae/sim2d.hpp"
#include "controlvae/tape.hpp"

CONTROLVAE_NAMESPACE_BEGIN

// Batched SimStates as B x 30 tensors in SimState::flatten order.
Tensor states_to_tensor(std::span<const SimState> states);
Tensor state_row(const SimState& s);
SimState tensor_to_state(const Tensor& t, int row = 0);
Tensor actions_to_tensor(std::span<const Action> actions);
Action tensor_to_action(const Tensor& t, int row = 0);
Tensor locals_to_tensor(std::span<const LocalState> locals);

// Weights of the global-frame state error.
struct StateErrorWeights {
  double pos = 1.0, rot = 1.0, vel = 0.1, ang_vel = 0.1;
};

namespace ops {

// Row-wise to_local: [B, 30] -> [B, 42].
Var state_to_local(Var states);

// Adds root-frame velocity deltas [B, 15] (dvx, dvy, domega per body) to
// the velocities, then advances positions and angles by dt.
Var integrate_deltas(Var states, Var deltas, Real dt);

// Per-row weighted squared error against fixed states, angles compared
// through the wrapped difference -> [B, 1].
Var state_error(Var pred, const Tensor& target, const StateErrorWeights& w);

// Elementwise atan2(y, x).
Var atan2(Var y, Var x);
// |wrap(a - target)| in [0, pi] elementwise; target broadcasts like mul_const.
Var angle_distance(Var a, const Tensor& target);
// max(x, 0) applied to (c - x), i.e. the one-sided shortfall below c.
Var shortfall(Var x, Real c);

}  // namespace ops

// Non-differentiable versions for logging and tests.
Tensor state_to_local(const Tensor& states);
double state_error(const SimState& a, const SimState& b, const StateErrorWeights& w);

CONTROLVAE_NAMESPACE_END
