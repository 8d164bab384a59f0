#pragma once

#include <functional>
#include <memory>
#include <json.hpp>
#include <string>
#include <vector>

#include "controlvae/cvae.hpp"

CONTROLVAE_NAMESPACE_BEGIN

enum class TaskTag { Height, Heading, Steering, Skill };

std::string to_string(TaskTag t);
TaskTag task_tag_from_string(const std::string& s);

// Goal of one task. Only the fields of the active tag are read. In the plane
// the character can face (or travel) only along +x (angle 0) or -x (pi).
struct TaskGoal {
  TaskTag tag = TaskTag::Heading;
  double height_sign = 1;   // H
  double heading = 0;       // theta_h*, wrapped to [-pi, pi]
  double speed = 0;         // v*, m/s
  double direction = 0;     // theta_v*, steering only
  int skill = 0;            // index of the one-hot c, skill only
};

struct TaskLossConfig {
  double w_heading = 2.0;
  double w_speed = 1.0;
  double w_direction = 2.0;
  double fall_height = 0.5;
  bool literal_height_sign = false;   // L = +H h0 instead of -H h0
};

// Planar facing: 0 when the root's forward axis points along +x, else pi.
double facing_angle(const SimState& s);

// L_g + L_fall for one transition (prev, cur). Speed is the root velocity
// along the facing direction (|vx| for steering). Throws ConfigError when the
// goal's tag differs from `tag`.
double task_loss(TaskTag tag, const SimState& prev, const SimState& cur, const TaskGoal& goal,
                 const TaskLossConfig& cfg = {});

// Width of the goal vector fed to task policies.
int goal_dim(TaskTag tag, int skills = 0);
Tensor goal_features(const TaskGoal& g, int skills = 0);
Tensor goals_to_tensor(std::span<const TaskGoal> goals, int skills = 0);

namespace ops {
// Batched task loss over states [B, 30] with one goal per row -> [B, 1].
Var task_loss(TaskTag tag, Var prev, Var cur, std::span<const TaskGoal> goals,
              const TaskLossConfig& cfg = {});
}  // namespace ops

// Uniform goal draws over configurable ranges.
struct GoalRanges {
  double heading_min = 0, heading_max = 0;
  double speed_min = 0, speed_max = 1.0;
  double direction_min = 0, direction_max = 0;
  int skills = 0;

  nlohmann::json to_json() const;
  static GoalRanges from_json(const nlohmann::json& j);
};
TaskGoal sample_goal(TaskTag tag, const GoalRanges& r, Rng& rng);

// ---------------------------------------------------------------- MPC

struct MpcConfig {
  int candidates = 128;   // N_MPC
  int horizon = 4;        // T_MPC
};

// Candidate rollouts in the world model. latents[t] and states[t + 1] are
// [N, d]; states[0] repeats the start state.
struct MpcRollouts {
  std::vector<Tensor> latents;
  std::vector<Tensor> states;
};

// Scores every candidate (lower is better).
using MpcScorer = std::function<std::vector<double>(const MpcRollouts&)>;

// Index of the smallest finite score, first index on ties. Throws
// NumericError when no score is finite.
int argmin_finite(std::span<const double> scores);

struct MpcResult {
  Tensor z;              // [1, latent], first latent of the best rollout
  int best = -1;
  std::vector<double> scores;
  MpcRollouts rollouts;
};

// Draws N latent sequences from the prior along world-model rollouts driven
// by the policy mean, scores them and returns the best first latent. The
// default scorer sums the task loss over the horizon.
MpcResult mpc_plan(const SimState& state, ControlVae& vae, WorldModel& wm, const TaskGoal& goal,
                   const MpcConfig& cfg, Rng& rng, const MpcScorer& scorer = nullptr,
                   const TaskLossConfig& loss = {});

// ---------------------------------------------------------- task policy

// Residual latent head on the frozen prior: z = mu_p(s) + mu_g(s, g) + sigma n.
// Same structure as the posterior with the goal in place of the reference.
class TaskPolicyNet {
 public:
  TaskPolicyNet() = default;
  TaskPolicyNet(const std::string& name, int goal_width, const std::vector<int>& hidden,
                int latent, Real sigma, Rng& rng);

  // Takes the normalized local state and goal features.
  Var residual(Tape& tape, Var ns, Var goal);
  struct Sample {
    Var z, mu_g;
  };
  Sample sample(Tape& tape, ControlVae& vae, Var ns, Var goal, const Tensor& noise);
  Tensor sample(ControlVae& vae, const LocalState& s, const TaskGoal& g, int skills, Rng& rng,
                bool deterministic = false);

  DenseNet& net() { return net_; }
  ParameterList parameters() { return net_.parameters(); }
  Real sigma() const { return sigma_; }
  int goal_width() const { return goal_width_; }

 private:
  DenseNet net_;
  Real sigma_ = 0.3;
  int goal_width_ = 0;
};

// Sum of squared residual latents per row -> [B, 1].
Var latent_regularizer(Var mu_g);

// Ring buffer of collected states with the goals that followed them.
class GoalBuffer {
 public:
  struct Entry {
    SimState state;
    std::vector<TaskGoal> goals;
  };
  explicit GoalBuffer(int capacity = 4096) : capacity_(capacity) {}
  void push(Entry e);
  int size() const { return static_cast<int>(entries_.size()); }
  int capacity() const { return capacity_; }
  const Entry& at(int i) const { return entries_.at(i); }
  const Entry& sample(Rng& rng) const;

 private:
  int capacity_;
  int head_ = 0;
  std::vector<Entry> entries_;
};

// Piecewise-constant goal script, a fresh goal every `period` control steps.
class GoalSchedule {
 public:
  GoalSchedule(TaskTag tag, const GoalRanges& ranges, int period, std::uint64_t seed);
  const TaskGoal& at(int step);
  int period() const { return period_; }

 private:
  TaskTag tag_;
  GoalRanges ranges_;
  int period_;
  Rng rng_;
  std::vector<TaskGoal> goals_;
};

struct TaskTrainConfig {
  TaskTag tag = TaskTag::Heading;
  int iterations = 2000;
  int batch = 64;              // N_ML
  int horizon = 16;            // T_ML
  double lr = 1e-3;
  double lr_decay = 0.99;
  double lr_floor = 0.1;       // fraction of lr
  double w_z = 20;
  int goal_period = 72;
  int buffer_capacity = 4096;
  int collect_steps = 16;      // real-environment steps per iteration
  int max_episode = 512;
  std::vector<int> hidden{64, 64};
  ClipMode clip = ClipMode::Elementwise;
  TaskLossConfig loss{};
  GoalRanges goals{};

  void validate() const;
  nlohmann::json to_json() const;
  static TaskTrainConfig from_json(const nlohmann::json& j);
};

// lr * max(decay^iteration, floor).
double task_learning_rate(int iteration, const TaskTrainConfig& cfg);

// Runs a goal-conditioned controller in the true simulator, resetting to a
// random dataset frame after a fall or max_episode steps.
class TaskEnv {
 public:
  TaskEnv(const Dataset& data, const CharacterSpec& spec, TaskTag tag, const GoalRanges& ranges,
          int goal_period, int max_episode, std::uint64_t seed);
  const SimState& state() const { return state_; }
  int step_index() const { return t_; }
  // Goals for steps t .. t + n - 1 of the current episode.
  std::vector<TaskGoal> upcoming(int n);
  void advance(const Action& a);
  int episodes() const { return episodes_; }
  int goal_changes() const { return goal_changes_; }

 private:
  void reset();
  const Dataset* data_;
  CharacterSpec spec_;
  TaskTag tag_;
  GoalRanges ranges_;
  int period_, max_episode_;
  Rng rng_;
  SimState state_;
  std::unique_ptr<GoalSchedule> schedule_;
  int t_ = 0;
  int episodes_ = 0;
  int goal_changes_ = 0;
};

struct TaskIterMetrics {
  int iteration = 0;
  double lr = 0;
  double task = 0;      // mean per-step L_g + L_fall over the synthetic batch
  double reg = 0;       // mean per-step ||mu_g||^2
  double total = 0;
  int buffer = 0;
  nlohmann::json to_json() const;
};

// Model-based task learning on the frozen ControlVAE and world model.
class TaskTrainer {
 public:
  TaskTrainer(ControlVae& vae, WorldModel& wm, const Dataset& data, const CharacterSpec& spec,
              const TaskTrainConfig& cfg, std::uint64_t seed);
  TaskIterMetrics iterate();
  TaskPolicyNet& policy() { return policy_; }
  GoalBuffer& buffer() { return buffer_; }
  TaskEnv& env() { return env_; }
  int iteration() const { return it_; }

 private:
  void collect();
  ControlVae* vae_;
  WorldModel* wm_;
  const Dataset* data_;
  CharacterSpec spec_;
  TaskTrainConfig cfg_;
  Rng init_rng_, collect_rng_, train_rng_;
  TaskPolicyNet policy_;
  RAdam opt_;
  GoalBuffer buffer_;
  TaskEnv env_;
  int it_ = 0;
};

// Runs each goal for `steps` control steps from `start` in the true
// simulator and returns the mean per-step task loss for each goal.
// `policy` == nullptr samples latents from the prior instead.
struct GoalEvaluation {
  std::vector<double> mean_loss;   // per goal
  std::vector<int> falls;          // per goal, 1 if the root dropped below fall_height
  std::vector<double> speed_error; // per goal, mean |v* - v|
  double overall = 0;
};
GoalEvaluation evaluate_goals(ControlVae& vae, TaskPolicyNet* policy, const SimState& start,
                              std::span<const TaskGoal> goals, const CharacterSpec& spec,
                              int steps, std::uint64_t seed, const TaskLossConfig& loss = {},
                              int skills = 0);

// ------------------------------------------------------------ skill control

// D(s_t, s_{t+1}; c) -> scalar over pair features with the one-hot skill
// appended. Plain ELU network so the input gradient is available on the tape.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(int pair_width, int skills, const std::vector<int>& hidden, Rng& rng);
  Var forward(Tape& tape, Var pairs, const Tensor& onehot);
  // Forward plus d out / d pairs as a differentiable node.
  struct WithGrad {
    Var out, input_grad;
  };
  WithGrad forward_with_input_grad(Tape& tape, Var pairs, const Tensor& onehot);
  DenseNet& net() { return net_; }
  ParameterList parameters() { return net_.parameters(); }

 private:
  DenseNet net_;
  int pair_width_ = 0;
};

// Skill logits C(s_t, s_{t+1}); probabilities via softmax.
class Classifier {
 public:
  Classifier() = default;
  Classifier(int pair_width, int skills, const std::vector<int>& hidden, Rng& rng);
  Var logits(Tape& tape, Var pairs);
  Tensor probabilities(const Tensor& pairs);
  DenseNet& net() { return net_; }
  ParameterList parameters() { return net_.parameters(); }

 private:
  DenseNet net_;
};

Tensor one_hot(std::span<const int> labels, int classes);

// Normalized local features of transition pairs [B, 84].
Var pair_features(Tape& tape, ControlVae& vae, Var prev, Var cur);
Tensor pair_features(ControlVae& vae, const Tensor& prev, const Tensor& cur);

// mean (D(real) - 1)^2 + mean (D(fake) + 1)^2 + w_g mean ||grad D(real)||^2.
Var lsgan_discriminator_loss(Tape& tape, Discriminator& d, Var real, const Tensor& real_onehot,
                             Var fake, const Tensor& fake_onehot, Real w_g);

struct SkillWeights {
  double w_d = 5.0, w_c = 0.5, w_r = 10.0;
  double task = 1.0;    // weight of the heading loss L_g'
};

struct SkillLosses {
  Var task, d, c, reg, total;
};

// Generated rollout: states[0..T] with the goals (one per step) that drove
// it and the residual means. Tracking rollout: posterior means z^c and the
// task policy's means z^c' for goals read off the same rollout.
struct SkillRollouts {
  std::vector<Var> gen_states;       // T + 1 x [B, 30]
  std::vector<std::vector<TaskGoal>> gen_goals;  // T x B
  std::vector<Var> gen_mu_g;         // T x [B, latent]
  std::vector<Var> track_posterior;  // T x [B, latent], mu_p + mu_q
  std::vector<Var> track_policy;     // T x [B, latent], mu_p + mu_g
};

SkillLosses skill_policy_losses(Tape& tape, ControlVae& vae, Discriminator& d, Classifier& c,
                                const SkillRollouts& r, int skills, const SkillWeights& w,
                                const TaskLossConfig& loss, double w_z);

// Goal read off consecutive tracking states: facing, forward speed and skill.
TaskGoal goal_from_transition(const SimState& prev, const SimState& cur, int skill);

struct SkillTrainConfig {
  TaskTrainConfig task = [] {
    TaskTrainConfig t;
    t.tag = TaskTag::Skill;
    return t;
  }();
  SkillWeights weights{};
  double w_g = 20;
  double lr_discriminator = 1e-4;
  double lr_classifier = 1e-2;
  std::vector<int> disc_hidden{64, 64};
  std::vector<int> class_hidden{64, 64};
  double clip_seconds = 4.0;

  nlohmann::json to_json() const;
  static SkillTrainConfig from_json(const nlohmann::json& j);
};

struct SkillIterMetrics {
  int iteration = 0;
  double task = 0, d = 0, c = 0, reg = 0, total = 0;
  double disc_loss = 0, class_loss = 0;
  double class_accuracy = 0;   // classifier on generated pairs vs their goal skill
  nlohmann::json to_json() const;
};

// Adversarial skill control. One skill clip per skill name in the dataset
// (the first clip carrying it), clip_seconds long.
class SkillTrainer {
 public:
  SkillTrainer(ControlVae& vae, WorldModel& wm, const Dataset& data, const CharacterSpec& spec,
               const SkillTrainConfig& cfg, std::uint64_t seed);
  SkillIterMetrics iterate();
  TaskPolicyNet& policy() { return policy_; }
  Discriminator& discriminator() { return disc_; }
  Classifier& classifier() { return cls_; }
  int skills() const { return static_cast<int>(clips_.size()); }
  const std::vector<std::string>& skill_names() const { return names_; }

 private:
  ControlVae* vae_;
  WorldModel* wm_;
  const Dataset* data_;
  CharacterSpec spec_;
  SkillTrainConfig cfg_;
  std::vector<std::string> names_;   // filled while clips_ is built
  std::vector<MotionClip> clips_;
  Rng init_rng_, collect_rng_, train_rng_;
  TaskPolicyNet policy_;
  Discriminator disc_;
  Classifier cls_;
  RAdam opt_policy_, opt_disc_, opt_cls_;
  GoalBuffer buffer_;
  TaskEnv env_;
  int it_ = 0;
};

CONTROLVAE_NAMESPACE_END
