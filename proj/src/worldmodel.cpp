#include "controlvae/worldmodel.hpp"

#include <cmath>

#include "controlvae/json_config.hpp"

CONTROLVAE_NAMESPACE_BEGIN

namespace {

// Local-state features with tiny spread (the up axis of an upright
// character) would otherwise be blown up far out of distribution.
constexpr Real kInputStdFloor = Real(0.1);
constexpr Real kDeltaScaleFloor = Real(0.01);

}  // namespace

nlohmann::json WorldModelConfig::to_json() const {
  return {{"hidden", hidden},
          {"w_pos", weights.pos},
          {"w_rot", weights.rot},
          {"w_vel", weights.vel},
          {"w_ang_vel", weights.ang_vel},
          {"lr", lr},
          {"horizon", horizon},
          {"batch", batch},
          {"updates", updates},
          {"clip", clip == ClipMode::Elementwise ? "elementwise" : "global_norm"}};
}

WorldModelConfig WorldModelConfig::from_json(const nlohmann::json& j) {
  WorldModelConfig c;
  ConfigReader r(j, "world_model");
  std::string clip = "elementwise";
  r.get("hidden", c.hidden)
      .get("w_pos", c.weights.pos)
      .get("w_rot", c.weights.rot)
      .get("w_vel", c.weights.vel)
      .get("w_ang_vel", c.weights.ang_vel)
      .get("lr", c.lr)
      .get("horizon", c.horizon)
      .get("batch", c.batch)
      .get("updates", c.updates)
      .get("clip", clip);
  r.finish();
  if (clip == "elementwise") {
    c.clip = ClipMode::Elementwise;
  } else if (clip == "global_norm") {
    c.clip = ClipMode::GlobalNorm;
  } else {
    throw ConfigError("world_model.clip must be 'elementwise' or 'global_norm'");
  }
  if (c.horizon < 1 || c.batch < 1 || c.updates < 0 || !(c.lr > 0)) {
    throw ConfigError("world_model: horizon/batch must be >= 1 and lr > 0");
  }
  return c;
}

WorldModel::WorldModel(WorldModelConfig cfg, double dt, Rng& rng)
    : cfg_(std::move(cfg)),
      dt_(dt),
      net_("wm", DenseConfig{kInputDim, 0, cfg_.hidden, kOutputDim, false, false}, rng),
      in_norm_("wm.in", kLocalDim),
      delta_scale_("wm.delta_scale", Tensor(1, kOutputDim, Real(1)), false) {
  if (!(dt > 0)) throw ConfigError("world model dt must be positive");
}

void WorldModel::fit_normalizers(std::span<const SimState> from, std::span<const SimState> to) {
  if (from.size() != to.size() || from.empty()) {
    throw DataError("world model normalizers need matching, non-empty transitions");
  }
  std::vector<LocalState> locals;
  locals.reserve(from.size());
  for (const SimState& s : from) locals.push_back(to_local(s));
  in_norm_.fit(locals_to_tensor(locals), kInputStdFloor);

  // root-mean-square of the root-frame velocity changes
  std::vector<double> sq(kOutputDim, 0.0);
  for (std::size_t i = 0; i < from.size(); ++i) {
    const double th = from[i].body[0].theta;
    const double c = std::cos(th), s = std::sin(th);
    for (int b = 0; b < kBodies; ++b) {
      const double dvx = to[i].body[b].vx - from[i].body[b].vx;
      const double dvy = to[i].body[b].vy - from[i].body[b].vy;
      const double d[3] = {c * dvx + s * dvy, -s * dvx + c * dvy,
                           to[i].body[b].omega - from[i].body[b].omega};
      for (int k = 0; k < 3; ++k) sq[3 * b + k] += d[k] * d[k];
    }
  }
  for (int k = 0; k < kOutputDim; ++k) {
    delta_scale_.value(0, k) = std::max(
        static_cast<Real>(std::sqrt(sq[k] / static_cast<double>(from.size()))), kDeltaScaleFloor);
  }
}

Var WorldModel::deltas(Tape& tape, Var states, Var actions) {
  if (actions.cols() != kActionDim) throw ConfigError("world model: action width must be 4");
  Var local = in_norm_.apply(tape, ops::state_to_local(states));
  Var enc = ops::concat_cols(std::vector<Var>{local, ops::cos(actions), ops::sin(actions)});
  Var out = net_.forward(tape, enc);
  return ops::mul(out, tape.param(delta_scale_));
}

Var WorldModel::predict(Tape& tape, Var states, Var actions) {
  return ops::integrate_deltas(states, deltas(tape, states, actions), static_cast<Real>(dt_));
}

Tensor WorldModel::predict(const Tensor& states, const Tensor& actions) {
  Tape tape;
  Var s = tape.constant(states);
  Var a = tape.constant(actions);
  return predict(tape, s, a).value();
}

SimState WorldModel::predict(const SimState& s, const Action& a) {
  const Tensor out = predict(state_row(s), actions_to_tensor(std::span(&a, 1)));
  SimState r = tensor_to_state(out);
  if (!r.finite()) throw NumericError("world model produced a non-finite state");
  return r;
}

std::vector<SimState> WorldModel::rollout(const SimState& start, std::span<const Action> actions) {
  if (actions.empty()) throw ConfigError("rollout horizon must be >= 1");
  std::vector<SimState> out{start};
  for (std::size_t t = 0; t < actions.size(); ++t) {
    const Tensor next = predict(state_row(out.back()), actions_to_tensor(actions.subspan(t, 1)));
    SimState s = tensor_to_state(next);
    if (!s.finite()) {
      throw NumericError("world model rollout: non-finite state at step " + std::to_string(t));
    }
    out.push_back(s);
  }
  return out;
}

ParameterList WorldModel::parameters() {
  ParameterList p = net_.parameters();
  for (Parameter* q : in_norm_.parameters()) p.push_back(q);
  p.push_back(&delta_scale_);
  return p;
}

Var wm_loss(Tape& tape, std::span<const Var> predicted, std::span<const Tensor> recorded,
            const StateErrorWeights& w) {
  if (predicted.size() != recorded.size() || predicted.empty()) {
    throw ConfigError("wm_loss: predicted and recorded lengths differ");
  }
  Var total;
  for (std::size_t t = 0; t < predicted.size(); ++t) {
    Var e = ops::mean(ops::state_error(predicted[t], recorded[t], w));
    total = t == 0 ? e : ops::add(total, e);
  }
  (void)tape;
  return total;
}

double wm_loss(std::span<const SimState> predicted, std::span<const SimState> recorded,
               const StateErrorWeights& w) {
  if (predicted.size() != recorded.size()) throw ConfigError("wm_loss: length mismatch");
  double e = 0;
  for (std::size_t t = 0; t < predicted.size(); ++t) e += state_error(predicted[t], recorded[t], w);
  return e;
}

WindowBatch sample_windows(const RolloutBuffer& buffer, int horizon, int batch, Rng& rng) {
  WindowBatch w;
  std::vector<SimState> start(batch);
  std::vector<std::vector<SimState>> rec(horizon, std::vector<SimState>(batch));
  std::vector<std::vector<Action>> act(horizon, std::vector<Action>(batch));
  for (int i = 0; i < batch; ++i) {
    const auto [tr, t0] = buffer.sample_window(horizon, rng);
    const Trajectory& traj = buffer.trajectories()[tr];
    const double dx = -traj.states[t0].body[0].x;
    start[i] = shift_x(traj.states[t0], dx);
    for (int k = 0; k < horizon; ++k) {
      rec[k][i] = shift_x(traj.states[t0 + k + 1], dx);
      act[k][i] = traj.actions[t0 + k];
    }
  }
  w.start = states_to_tensor(start);
  for (int k = 0; k < horizon; ++k) {
    w.actions.push_back(actions_to_tensor(act[k]));
    w.recorded.push_back(states_to_tensor(rec[k]));
  }
  return w;
}

double world_model_step(WorldModel& wm, RAdam& opt, const WindowBatch& batch) {
  const ParameterList params = wm.parameters();
  zero_grads(params);
  Tape tape;
  Var s = tape.constant(batch.start);
  std::vector<Var> preds;
  for (std::size_t t = 0; t < batch.actions.size(); ++t) {
    s = wm.predict(tape, s, tape.constant(batch.actions[t]));
    preds.push_back(s);
  }
  Var loss = wm_loss(tape, preds, batch.recorded, wm.config().weights);
  const double value = loss.value()(0, 0);
  if (!std::isfinite(value)) throw NumericError("world model loss is not finite");
  tape.backward(loss);
  clip_gradients(params, wm.config().clip);
  opt.step(params);
  return value;
}

double train_world_model(WorldModel& wm, RAdam& opt, const RolloutBuffer& buffer, Rng& rng) {
  const WorldModelConfig& c = wm.config();
  if (buffer.window_count(c.horizon) == 0) {
    throw DataError("world model training needs a stored trajectory with at least " +
                    std::to_string(c.horizon) + " transitions");
  }
  double total = 0;
  for (int u = 0; u < c.updates; ++u) {
    total += world_model_step(wm, opt, sample_windows(buffer, c.horizon, c.batch, rng));
  }
  return c.updates > 0 ? total / c.updates : 0.0;
}

CONTROLVAE_NAMESPACE_END
