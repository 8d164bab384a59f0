#pragma once

#include <json.hpp>
#include <span>
#include <vector>

#include "controlvae/motiondata.hpp"
#include "controlvae/nn.hpp"
#include "controlvae/optim.hpp"
#include "controlvae/state_ops.hpp"

CONTROLVAE_NAMESPACE_BEGIN

struct WorldModelConfig {
  std::vector<int> hidden{128, 128, 128, 128};
  StateErrorWeights weights{};   // W' of the world-model loss
  double lr = 2e-3;
  int horizon = 8;               // T_w
  int batch = 128;               // N_w
  int updates = 8;               // per epoch
  ClipMode clip = ClipMode::Elementwise;

  nlohmann::json to_json() const;
  static WorldModelConfig from_json(const nlohmann::json& j);
};

// Deterministic dynamics model. The net maps (normalized local state,
// [cos a | sin a]) to root-frame velocity deltas scaled by a frozen
// per-channel scale; the new state follows by semi-implicit Euler.
class WorldModel {
 public:
  static constexpr int kInputDim = kLocalDim + 2 * kActionDim;
  static constexpr int kOutputDim = 3 * kBodies;

  WorldModel() = default;
  WorldModel(WorldModelConfig cfg, double dt, Rng& rng);

  // Fits the input normalizer and delta scale from recorded transitions.
  void fit_normalizers(std::span<const SimState> from, std::span<const SimState> to);

  Var predict(Tape& tape, Var states, Var actions);
  Tensor predict(const Tensor& states, const Tensor& actions);
  SimState predict(const SimState& s, const Action& a);
  // Root-frame velocity deltas only, [B, 15].
  Var deltas(Tape& tape, Var states, Var actions);

  // Open-loop rollout; result[0] is the start state. Throws NumericError
  // naming the step if a prediction is non-finite.
  std::vector<SimState> rollout(const SimState& start, std::span<const Action> actions);

  ParameterList parameters();
  DenseNet& net() { return net_; }
  Normalizer& input_normalizer() { return in_norm_; }
  Parameter& delta_scale() { return delta_scale_; }
  const WorldModelConfig& config() const { return cfg_; }
  double dt() const { return dt_; }

 private:
  WorldModelConfig cfg_;
  double dt_ = 0.05;
  DenseNet net_;
  Normalizer in_norm_;
  Parameter delta_scale_;
};

// Sum over steps of the weighted global state error, averaged over the
// batch. `predicted` and `recorded` are [B, 30] per step.
Var wm_loss(Tape& tape, std::span<const Var> predicted, std::span<const Tensor> recorded,
            const StateErrorWeights& w);
double wm_loss(std::span<const SimState> predicted, std::span<const SimState> recorded,
               const StateErrorWeights& w);

// A batch of recorded windows: start states, actions and the recorded
// successors, all horizontally re-centred on the start root.
struct WindowBatch {
  Tensor start;                    // [B, 30]
  std::vector<Tensor> actions;     // T x [B, 4]
  std::vector<Tensor> recorded;    // T x [B, 30]
};

WindowBatch sample_windows(const RolloutBuffer& buffer, int horizon, int batch, Rng& rng);

// One optimizer step on a window batch; returns the loss before the step.
double world_model_step(WorldModel& wm, RAdam& opt, const WindowBatch& batch);

// `updates` steps on fresh windows; returns the mean loss.
double train_world_model(WorldModel& wm, RAdam& opt, const RolloutBuffer& buffer, Rng& rng);

CONTROLVAE_NAMESPACE_END
