#include "controlvae/highlevel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "controlvae/json_config.hpp"
#include "controlvae/state_ops.hpp"

CONTROLVAE_NAMESPACE_BEGIN

namespace {

constexpr int kRootY = 1, kRootVx = 3;
constexpr double kFallHeight = 0.5;

Tensor column(const std::vector<double>& v) {
  Tensor t(static_cast<int>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) t(static_cast<int>(i), 0) = static_cast<Real>(v[i]);
  return t;
}

Tensor local_row(const LocalState& s) { return locals_to_tensor(std::span<const LocalState>(&s, 1)); }

Tensor vstack(const std::vector<Tensor>& parts) {
  int rows = 0;
  for (const Tensor& t : parts) rows += t.rows;
  Tensor out(rows, parts.at(0).cols);
  int r = 0;
  for (const Tensor& t : parts) {
    std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r) * out.cols);
    r += t.rows;
  }
  return out;
}

double mean_of(const Tensor& t) {
  double s = 0;
  for (Real v : t.data) s += v;
  return t.data.empty() ? 0 : s / static_cast<double>(t.data.size());
}

double angle_gap(double a, double b) { return std::fabs(wrap_angle(a - b)); }

void check_tag(TaskTag tag, const TaskGoal& g) {
  if (g.tag != tag) {
    throw ConfigError("task goal tagged '" + to_string(g.tag) + "' given to a '" + to_string(tag) +
                      "' loss");
  }
}

double facing_of_row(const Tensor& states, int row) {
  return std::cos(states(row, 2)) >= 0 ? 0.0 : kPi;
}

ClipMode parse_clip(const std::string& s) {
  if (s == "elementwise") return ClipMode::Elementwise;
  if (s == "global_norm") return ClipMode::GlobalNorm;
  throw ConfigError("unknown clip mode '" + s + "'");
}

std::string clip_name(ClipMode m) { return m == ClipMode::Elementwise ? "elementwise" : "global_norm"; }

nlohmann::json loss_to_json(const TaskLossConfig& c) {
  return {{"w_heading", c.w_heading},
          {"w_speed", c.w_speed},
          {"w_direction", c.w_direction},
          {"fall_height", c.fall_height},
          {"literal_height_sign", c.literal_height_sign}};
}

TaskLossConfig loss_from_json(const nlohmann::json& j) {
  TaskLossConfig c;
  ConfigReader r(j, "task.loss");
  r.get("w_heading", c.w_heading)
      .get("w_speed", c.w_speed)
      .get("w_direction", c.w_direction)
      .get("fall_height", c.fall_height)
      .get("literal_height_sign", c.literal_height_sign)
      .finish();
  return c;
}

}  // namespace

std::string to_string(TaskTag t) {
  switch (t) {
    case TaskTag::Height: return "height";
    case TaskTag::Heading: return "heading";
    case TaskTag::Steering: return "steering";
    case TaskTag::Skill: return "skill";
  }
  return "?";
}

TaskTag task_tag_from_string(const std::string& s) {
  if (s == "height") return TaskTag::Height;
  if (s == "heading") return TaskTag::Heading;
  if (s == "steering") return TaskTag::Steering;
  if (s == "skill") return TaskTag::Skill;
  throw ConfigError("unknown task '" + s + "' (height, heading, steering, skill)");
}

double facing_angle(const SimState& s) { return std::cos(s.body[0].theta) >= 0 ? 0.0 : kPi; }

double task_loss(TaskTag tag, const SimState& /*prev*/, const SimState& cur, const TaskGoal& g,
                 const TaskLossConfig& cfg) {
  check_tag(tag, g);
  const double h0 = cur.body[0].y;
  const double vx = cur.body[0].vx;
  const double fall = std::max(cfg.fall_height - h0, 0.0);
  double lg = 0;
  switch (tag) {
    case TaskTag::Height:
      lg = (cfg.literal_height_sign ? 1.0 : -1.0) * g.height_sign * h0;
      break;
    case TaskTag::Heading:
    case TaskTag::Skill: {
      const double facing = facing_angle(cur);
      const double v = vx * std::cos(facing);
      lg = cfg.w_heading * angle_gap(g.heading, facing) +
           cfg.w_speed * std::fabs(g.speed - v) / std::max(g.speed, 1.0);
      break;
    }
    case TaskTag::Steering: {
      const double travel = vx >= 0 ? 0.0 : kPi;
      lg = cfg.w_heading * angle_gap(g.heading, facing_angle(cur)) +
           cfg.w_direction * angle_gap(g.direction, travel) +
           cfg.w_speed * std::fabs(g.speed - std::fabs(vx)) / std::max(g.speed, 1.0);
      break;
    }
  }
  return lg + fall;
}

int goal_dim(TaskTag tag, int skills) {
  switch (tag) {
    case TaskTag::Height: return 1;
    case TaskTag::Heading: return 3;
    case TaskTag::Steering: return 5;
    case TaskTag::Skill: return 3 + skills;
  }
  return 0;
}

Tensor goal_features(const TaskGoal& g, int skills) {
  Tensor t(1, goal_dim(g.tag, skills));
  auto put = [&](int k, double v) { t(0, k) = static_cast<Real>(v); };
  switch (g.tag) {
    case TaskTag::Height:
      put(0, g.height_sign);
      break;
    case TaskTag::Heading:
      put(0, std::cos(g.heading));
      put(1, std::sin(g.heading));
      put(2, g.speed);
      break;
    case TaskTag::Steering:
      put(0, std::cos(g.heading));
      put(1, std::sin(g.heading));
      put(2, std::cos(g.direction));
      put(3, std::sin(g.direction));
      put(4, g.speed);
      break;
    case TaskTag::Skill:
      if (g.skill < 0 || g.skill >= skills) {
        throw ConfigError("skill index " + std::to_string(g.skill) + " outside " +
                          std::to_string(skills) + " skills");
      }
      put(0, std::cos(g.heading));
      put(1, std::sin(g.heading));
      put(2, g.speed);
      put(3 + g.skill, 1);
      break;
  }
  return t;
}

Tensor goals_to_tensor(std::span<const TaskGoal> goals, int skills) {
  if (goals.empty()) throw ConfigError("goals_to_tensor: no goals");
  const int d = goal_dim(goals[0].tag, skills);
  Tensor t(static_cast<int>(goals.size()), d);
  for (std::size_t i = 0; i < goals.size(); ++i) {
    if (goals[i].tag != goals[0].tag) throw ConfigError("goals_to_tensor: mixed task tags");
    Tensor row = goal_features(goals[i], skills);
    for (int k = 0; k < d; ++k) t(static_cast<int>(i), k) = row(0, k);
  }
  return t;
}

namespace ops {

Var task_loss(TaskTag tag, Var /*prev*/, Var cur, std::span<const TaskGoal> goals,
              const TaskLossConfig& cfg) {
  const Tensor& cv = cur.value();
  const int B = cv.rows;
  if (static_cast<int>(goals.size()) != B) throw ConfigError("task_loss: one goal per row");
  for (const TaskGoal& g : goals) check_tag(tag, g);

  Var h0 = slice_cols(cur, kRootY, 1);
  Var fall = shortfall(h0, static_cast<Real>(cfg.fall_height));
  Var vx = slice_cols(cur, kRootVx, 1);

  std::vector<double> constant(B, 0.0), coef(B, 0.0), target(B, 0.0), inv(B, 0.0);
  Var lg;
  switch (tag) {
    case TaskTag::Height: {
      for (int i = 0; i < B; ++i) coef[i] = (cfg.literal_height_sign ? 1.0 : -1.0) * goals[i].height_sign;
      lg = mul_const(h0, column(coef));
      break;
    }
    case TaskTag::Heading:
    case TaskTag::Skill:
    case TaskTag::Steering: {
      const bool steer = tag == TaskTag::Steering;
      for (int i = 0; i < B; ++i) {
        const TaskGoal& g = goals[i];
        constant[i] = cfg.w_heading * angle_gap(g.heading, facing_of_row(cv, i));
        if (steer) {
          const double travel = cv(i, kRootVx) >= 0 ? 0.0 : kPi;
          constant[i] += cfg.w_direction * angle_gap(g.direction, travel);
        } else {
          coef[i] = std::cos(facing_of_row(cv, i));
        }
        target[i] = -g.speed;
        inv[i] = cfg.w_speed / std::max(g.speed, 1.0);
      }
      Var v = steer ? abs(vx) : mul_const(vx, column(coef));
      Var err = mul_const(abs(add_const(v, column(target))), column(inv));
      lg = add_const(err, column(constant));
      break;
    }
  }
  return add(lg, fall);
}

}  // namespace ops

nlohmann::json GoalRanges::to_json() const {
  return {{"heading_min", heading_min},     {"heading_max", heading_max},
          {"speed_min", speed_min},         {"speed_max", speed_max},
          {"direction_min", direction_min}, {"direction_max", direction_max}};
}

GoalRanges GoalRanges::from_json(const nlohmann::json& j) {
  GoalRanges g;
  ConfigReader r(j, "task.goals");
  r.get("heading_min", g.heading_min)
      .get("heading_max", g.heading_max)
      .get("speed_min", g.speed_min)
      .get("speed_max", g.speed_max)
      .get("direction_min", g.direction_min)
      .get("direction_max", g.direction_max)
      .finish();
  return g;
}

TaskGoal sample_goal(TaskTag tag, const GoalRanges& r, Rng& rng) {
  TaskGoal g;
  g.tag = tag;
  switch (tag) {
    case TaskTag::Height:
      g.height_sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      break;
    case TaskTag::Steering:
      g.direction = wrap_angle(rng.uniform(r.direction_min, r.direction_max));
      [[fallthrough]];
    case TaskTag::Heading:
    case TaskTag::Skill:
      g.heading = wrap_angle(rng.uniform(r.heading_min, r.heading_max));
      g.speed = rng.uniform(r.speed_min, r.speed_max);
      if (tag == TaskTag::Skill) {
        if (r.skills < 1) throw ConfigError("skill goals need at least one skill");
        g.skill = rng.uniform_int(r.skills);
      }
      break;
  }
  return g;
}

// ---------------------------------------------------------------- MPC

int argmin_finite(std::span<const double> scores) {
  int best = -1;
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    if (!std::isfinite(scores[i])) continue;
    if (best < 0 || scores[i] < scores[best]) best = i;
  }
  if (best < 0) throw NumericError("mpc_plan: every candidate rollout is non-finite");
  return best;
}

MpcResult mpc_plan(const SimState& state, ControlVae& vae, WorldModel& wm, const TaskGoal& goal,
                   const MpcConfig& cfg, Rng& rng, const MpcScorer& scorer,
                   const TaskLossConfig& loss) {
  if (cfg.candidates < 1 || cfg.horizon < 1) throw ConfigError("mpc_plan: empty candidate set");
  const int N = cfg.candidates, latent = vae.config().latent;
  MpcResult res;
  std::vector<SimState> start(N, state);
  Tensor S = states_to_tensor(start);
  res.rollouts.states.push_back(S);
  for (int t = 0; t < cfg.horizon; ++t) {
    Tape tape;
    Var s = tape.constant(S);
    Var ns = vae.normalize(tape, ops::state_to_local(s));
    ControlVae::Latent L = vae.prior_sample(tape, ns, normal_tensor(N, latent, rng));
    Var a = vae.policy_mean(tape, ns, L.z);
    S = wm.predict(tape, s, a).value();
    res.rollouts.latents.push_back(L.z.value());
    res.rollouts.states.push_back(S);
  }

  if (scorer) {
    res.scores = scorer(res.rollouts);
    if (static_cast<int>(res.scores.size()) != N) {
      throw ConfigError("mpc_plan: scorer returned " + std::to_string(res.scores.size()) +
                        " scores for " + std::to_string(N) + " candidates");
    }
  } else {
    res.scores.assign(N, 0.0);
    for (int i = 0; i < N; ++i) {
      for (int t = 0; t < cfg.horizon; ++t) {
        const SimState a = tensor_to_state(res.rollouts.states[t], i);
        const SimState b = tensor_to_state(res.rollouts.states[t + 1], i);
        res.scores[i] += b.finite() ? task_loss(goal.tag, a, b, goal, loss)
                                    : std::numeric_limits<double>::quiet_NaN();
      }
    }
  }
  res.best = argmin_finite(res.scores);
  res.z = Tensor(1, latent);
  for (int k = 0; k < latent; ++k) res.z(0, k) = res.rollouts.latents[0](res.best, k);
  return res;
}

// ---------------------------------------------------------- task policy

TaskPolicyNet::TaskPolicyNet(const std::string& name, int goal_width,
                             const std::vector<int>& hidden, int latent, Real sigma, Rng& rng)
    : net_(name, DenseConfig{kLocalDim + goal_width, goal_width, hidden, latent, true, false}, rng),
      sigma_(sigma),
      goal_width_(goal_width) {
  // same small-output start as the posterior
  net_.scale_output_layer(Real(0.1));
}

Var TaskPolicyNet::residual(Tape& tape, Var ns, Var goal) {
  return net_.forward(tape, ops::concat_cols(ns, goal), goal);
}

TaskPolicyNet::Sample TaskPolicyNet::sample(Tape& tape, ControlVae& vae, Var ns, Var goal,
                                            const Tensor& noise) {
  Var mu_g = residual(tape, ns, goal);
  Var mean = ops::add(vae.prior_mean(tape, ns), mu_g);
  return {reparam_sample(tape, mean, sigma_, noise), mu_g};
}

Tensor TaskPolicyNet::sample(ControlVae& vae, const LocalState& s, const TaskGoal& g, int skills,
                             Rng& rng, bool deterministic) {
  Tape tape;
  Var ns = vae.normalize(tape, tape.constant(local_row(s)));
  Var goal = tape.constant(goal_features(g, skills));
  const int latent = net_.config().out;
  Tensor noise = deterministic ? Tensor(1, latent) : normal_tensor(1, latent, rng);
  return sample(tape, vae, ns, goal, noise).z.value();
}

Var latent_regularizer(Var mu_g) { return ops::sum_cols(ops::square(mu_g)); }

void GoalBuffer::push(Entry e) {
  if (static_cast<int>(entries_.size()) < capacity_) {
    entries_.push_back(std::move(e));
  } else {
    entries_[head_] = std::move(e);
  }
  head_ = (head_ + 1) % capacity_;
}

const GoalBuffer::Entry& GoalBuffer::sample(Rng& rng) const {
  if (entries_.empty()) throw DataError("goal buffer is empty");
  return entries_[rng.uniform_int(size())];
}

GoalSchedule::GoalSchedule(TaskTag tag, const GoalRanges& ranges, int period, std::uint64_t seed)
    : tag_(tag), ranges_(ranges), period_(period), rng_(seed) {
  if (period < 1) throw ConfigError("goal period must be positive");
}

const TaskGoal& GoalSchedule::at(int step) {
  const std::size_t k = static_cast<std::size_t>(step / period_);
  while (goals_.size() <= k) goals_.push_back(sample_goal(tag_, ranges_, rng_));
  return goals_[k];
}

void TaskTrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("task: " + what);
  };
  need(iterations >= 0, "iterations must be >= 0");
  need(batch > 0 && horizon > 0, "batch and horizon must be positive");
  need(lr > 0 && lr_decay > 0 && lr_decay <= 1 && lr_floor >= 0, "bad learning-rate schedule");
  need(w_z >= 0, "w_z must be >= 0");
  need(goal_period > 0 && buffer_capacity > 0 && collect_steps >= 0 && max_episode > 0,
       "periods and capacities must be positive");
  need(goals.speed_min <= goals.speed_max && goals.speed_min >= 0, "bad speed range");
  need(goals.heading_min <= goals.heading_max && goals.direction_min <= goals.direction_max,
       "bad angle range");
}

nlohmann::json TaskTrainConfig::to_json() const {
  return {{"tag", to_string(tag)},
          {"iterations", iterations},
          {"batch", batch},
          {"horizon", horizon},
          {"lr", lr},
          {"lr_decay", lr_decay},
          {"lr_floor", lr_floor},
          {"w_z", w_z},
          {"goal_period", goal_period},
          {"buffer_capacity", buffer_capacity},
          {"collect_steps", collect_steps},
          {"max_episode", max_episode},
          {"hidden", hidden},
          {"clip", clip_name(clip)},
          {"loss", loss_to_json(loss)},
          {"goals", goals.to_json()}};
}

TaskTrainConfig TaskTrainConfig::from_json(const nlohmann::json& j) {
  TaskTrainConfig c;
  ConfigReader r(j, "task");
  std::string tag = to_string(c.tag), clip = clip_name(c.clip);
  r.get("tag", tag)
      .get("iterations", c.iterations)
      .get("batch", c.batch)
      .get("horizon", c.horizon)
      .get("lr", c.lr)
      .get("lr_decay", c.lr_decay)
      .get("lr_floor", c.lr_floor)
      .get("w_z", c.w_z)
      .get("goal_period", c.goal_period)
      .get("buffer_capacity", c.buffer_capacity)
      .get("collect_steps", c.collect_steps)
      .get("max_episode", c.max_episode)
      .get("hidden", c.hidden)
      .get("clip", clip);
  if (r.has("loss")) c.loss = loss_from_json(r.at("loss"));
  if (r.has("goals")) c.goals = GoalRanges::from_json(r.at("goals"));
  r.finish();
  c.tag = task_tag_from_string(tag);
  c.clip = parse_clip(clip);
  c.validate();
  return c;
}

double task_learning_rate(int iteration, const TaskTrainConfig& cfg) {
  return cfg.lr * std::max(std::pow(cfg.lr_decay, iteration), cfg.lr_floor);
}

TaskEnv::TaskEnv(const Dataset& data, const CharacterSpec& spec, TaskTag tag,
                 const GoalRanges& ranges, int goal_period, int max_episode, std::uint64_t seed)
    : data_(&data),
      spec_(spec),
      tag_(tag),
      ranges_(ranges),
      period_(goal_period),
      max_episode_(max_episode),
      rng_(seed) {
  if (data.empty()) throw DataError("task environment needs a non-empty dataset");
  reset();
}

void TaskEnv::reset() {
  const MotionClip& c = data_->clips[rng_.uniform_int(data_->size())];
  state_ = c.frames[rng_.uniform_int(c.frame_count())];
  schedule_ = std::make_unique<GoalSchedule>(tag_, ranges_, period_, rng_.next_u64());
  t_ = 0;
  ++episodes_;
}

std::vector<TaskGoal> TaskEnv::upcoming(int n) {
  std::vector<TaskGoal> g;
  for (int k = 0; k < n; ++k) g.push_back(schedule_->at(t_ + k));
  return g;
}

void TaskEnv::advance(const Action& a) {
  try {
    state_ = step(state_, a, spec_);
  } catch (const SimulationDiverged&) {
    reset();
    return;
  }
  ++t_;
  if (t_ % period_ == 0) ++goal_changes_;
  if (state_.body[0].y < kFallHeight || t_ >= max_episode_) reset();
}

nlohmann::json TaskIterMetrics::to_json() const {
  return {{"iteration", iteration}, {"lr", lr},         {"task", task},
          {"reg", reg},             {"total", total},   {"buffer", buffer}};
}

namespace {

struct Rollout {
  std::vector<Var> states;   // T + 1
  std::vector<Var> mu_g;     // T
  std::vector<std::vector<TaskGoal>> goals;
};

// Task policy through the frozen policy and world model from buffered starts.
Rollout policy_rollout(Tape& tape, ControlVae& vae, WorldModel& wm, TaskPolicyNet& policy,
                       const std::vector<const GoalBuffer::Entry*>& batch, int horizon,
                       int skills, Rng& rng) {
  const int B = static_cast<int>(batch.size());
  const int latent = policy.net().config().out;
  std::vector<SimState> starts;
  for (const auto* e : batch) {
    if (static_cast<int>(e->goals.size()) < horizon) throw DataError("goal sequence too short");
    starts.push_back(e->state);
  }
  Rollout r;
  Var s = tape.constant(states_to_tensor(starts));
  r.states.push_back(s);
  for (int t = 0; t < horizon; ++t) {
    std::vector<TaskGoal> g;
    for (const auto* e : batch) g.push_back(e->goals[t]);
    Var ns = vae.normalize(tape, ops::state_to_local(s));
    TaskPolicyNet::Sample smp =
        policy.sample(tape, vae, ns, tape.constant(goals_to_tensor(g, skills)),
                      normal_tensor(B, latent, rng));
    Var a = vae.policy_sample(tape, ns, smp.z, normal_tensor(B, kActionDim, rng));
    s = wm.predict(tape, s, a);
    if (!s.value().all_finite()) {
      throw NumericError("task rollout: non-finite state at step " + std::to_string(t));
    }
    r.states.push_back(s);
    r.mu_g.push_back(smp.mu_g);
    r.goals.push_back(std::move(g));
  }
  return r;
}

std::vector<const GoalBuffer::Entry*> sample_entries(const GoalBuffer& buf, int n, Rng& rng) {
  std::vector<const GoalBuffer::Entry*> out;
  for (int i = 0; i < n; ++i) out.push_back(&buf.sample(rng));
  return out;
}

void collect_steps(ControlVae& vae, TaskPolicyNet& policy, TaskEnv& env, GoalBuffer& buffer,
                   int steps, int horizon, int skills, Rng& rng) {
  for (int k = 0; k < steps; ++k) {
    const SimState s = env.state();
    std::vector<TaskGoal> goals = env.upcoming(horizon);
    const LocalState ls = to_local(s);
    const Tensor z = policy.sample(vae, ls, goals[0], skills, rng);
    const Action a = vae.policy_act(ls, z, rng, false);
    buffer.push({s, std::move(goals)});
    env.advance(a);
  }
}

ParameterList frozen_upstream(ControlVae& vae, WorldModel& wm) {
  ParameterList p = vae.parameters();
  ParameterList w = wm.parameters();
  p.insert(p.end(), w.begin(), w.end());
  return p;
}

}  // namespace

TaskTrainer::TaskTrainer(ControlVae& vae, WorldModel& wm, const Dataset& data,
                         const CharacterSpec& spec, const TaskTrainConfig& cfg, std::uint64_t seed)
    : vae_(&vae),
      wm_(&wm),
      data_(&data),
      spec_(spec),
      cfg_(cfg),
      init_rng_(Rng::stream(seed, "task.init")),
      collect_rng_(Rng::stream(seed, "task.collect")),
      train_rng_(Rng::stream(seed, "task.train")),
      policy_("task", goal_dim(cfg.tag, cfg.goals.skills), cfg.hidden, vae.config().latent,
              vae.sigma_latent(), init_rng_),
      opt_(policy_.parameters(), cfg.lr),
      buffer_(cfg.buffer_capacity),
      env_(data, spec, cfg.tag, cfg.goals, cfg.goal_period, cfg.max_episode,
           Rng::stream(seed, "task.env").next_u64()) {
  cfg_.validate();
  if (cfg.tag == TaskTag::Skill) throw ConfigError("skill control uses SkillTrainer");
}

void TaskTrainer::collect() {
  // at least one entry so the first iteration has something to train on
  collect_steps(*vae_, policy_, env_, buffer_, std::max(cfg_.collect_steps, buffer_.size() ? 0 : 1),
                cfg_.horizon, cfg_.goals.skills, collect_rng_);
}

TaskIterMetrics TaskTrainer::iterate() {
  collect();
  TaskIterMetrics m;
  m.iteration = it_;
  m.lr = task_learning_rate(it_, cfg_);
  opt_.set_lr(m.lr);

  ParameterList params = policy_.parameters();
  zero_grads(params);
  {
    Tape tape;
    tape.freeze(frozen_upstream(*vae_, *wm_));
    auto batch = sample_entries(buffer_, cfg_.batch, train_rng_);
    Rollout r = policy_rollout(tape, *vae_, *wm_, policy_, batch, cfg_.horizon,
                               cfg_.goals.skills, train_rng_);
    Var task, reg;
    for (int t = 0; t < cfg_.horizon; ++t) {
      Var lt = ops::task_loss(cfg_.tag, r.states[t], r.states[t + 1], r.goals[t], cfg_.loss);
      Var rt = latent_regularizer(r.mu_g[t]);
      task = t == 0 ? lt : ops::add(task, lt);
      reg = t == 0 ? rt : ops::add(reg, rt);
    }
    Var total = ops::add(ops::mean(task), ops::scale(ops::mean(reg), static_cast<Real>(cfg_.w_z)));
    m.task = mean_of(task.value()) / cfg_.horizon;
    m.reg = mean_of(reg.value()) / cfg_.horizon;
    m.total = total.value()(0, 0);
    tape.backward(total);
  }
  clip_gradients(params, cfg_.clip);
  opt_.step(params);
  m.buffer = buffer_.size();
  ++it_;
  return m;
}

GoalEvaluation evaluate_goals(ControlVae& vae, TaskPolicyNet* policy, const SimState& start,
                              std::span<const TaskGoal> goals, const CharacterSpec& spec,
                              int steps, std::uint64_t seed, const TaskLossConfig& loss,
                              int skills) {
  GoalEvaluation ev;
  for (std::size_t i = 0; i < goals.size(); ++i) {
    const TaskGoal& g = goals[i];
    Rng rng(splitmix64(seed + i));
    SimState s = start;
    double sum = 0, last = 0, speed_err = 0;
    int fell = 0;
    for (int t = 0; t < steps; ++t) {
      const LocalState ls = to_local(s);
      const Tensor z = policy ? policy->sample(vae, ls, g, skills, rng) : vae.prior_sample(ls, rng);
      const Action a = vae.policy_act(ls, z, rng, true);
      SimState next;
      try {
        next = step(s, a, spec);
      } catch (const SimulationDiverged&) {
        // charge the remaining steps at the last observed loss
        fell = 1;
        sum += last * (steps - t);
        break;
      }
      last = task_loss(g.tag, s, next, g, loss);
      sum += last;
      speed_err += std::fabs(g.speed - next.body[0].vx * std::cos(facing_angle(next)));
      if (next.body[0].y < loss.fall_height) fell = 1;
      s = next;
    }
    ev.mean_loss.push_back(sum / steps);
    ev.falls.push_back(fell);
    ev.speed_error.push_back(speed_err / steps);
  }
  double tot = 0;
  for (double v : ev.mean_loss) tot += v;
  ev.overall = ev.mean_loss.empty() ? 0 : tot / static_cast<double>(ev.mean_loss.size());
  return ev;
}

// ------------------------------------------------------------ skill control

Discriminator::Discriminator(int pair_width, int skills, const std::vector<int>& hidden, Rng& rng)
    : net_("disc", DenseConfig{pair_width + skills, 0, hidden, 1, false, false}, rng),
      pair_width_(pair_width) {}

Var Discriminator::forward(Tape& tape, Var pairs, const Tensor& onehot) {
  return net_.forward(tape, ops::concat_cols(pairs, tape.constant(onehot)));
}

Discriminator::WithGrad Discriminator::forward_with_input_grad(Tape& tape, Var pairs,
                                                               const Tensor& onehot) {
  Var h = ops::concat_cols(pairs, tape.constant(onehot));
  const int L = net_.layer_count();
  std::vector<Var> pre;
  Var out;
  for (int i = 0; i < L; ++i) {
    DenseNet::Layer& layer = net_.layer(i);
    Var a = ops::linear(h, tape.param(layer.weight), tape.param(layer.bias));
    if (i + 1 < L) {
      pre.push_back(a);
      h = ops::elu(a);
    } else {
      out = a;
    }
  }
  // d out / d input, chained by hand so it stays on the tape
  Var g = ops::matmul(tape.constant(Tensor(pairs.rows(), 1, 1.0)), tape.param(net_.layer(L - 1).weight));
  for (int i = L - 2; i >= 0; --i) {
    g = ops::mul(g, ops::elu_grad(pre[i]));
    g = ops::matmul(g, tape.param(net_.layer(i).weight));
  }
  return {out, ops::slice_cols(g, 0, pair_width_)};
}

Classifier::Classifier(int pair_width, int skills, const std::vector<int>& hidden, Rng& rng)
    : net_("classifier", DenseConfig{pair_width, 0, hidden, skills, false, false}, rng) {}

Var Classifier::logits(Tape& tape, Var pairs) { return net_.forward(tape, pairs); }

Tensor Classifier::probabilities(const Tensor& pairs) {
  Tape tape;
  return ops::softmax_rows(logits(tape, tape.constant(pairs))).value();
}

Tensor one_hot(std::span<const int> labels, int classes) {
  Tensor t(static_cast<int>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw ConfigError("one_hot: label out of range");
    t(static_cast<int>(i), labels[i]) = 1;
  }
  return t;
}

Var pair_features(Tape& tape, ControlVae& vae, Var prev, Var cur) {
  return ops::concat_cols(vae.normalize(tape, ops::state_to_local(prev)),
                          vae.normalize(tape, ops::state_to_local(cur)));
}

Tensor pair_features(ControlVae& vae, const Tensor& prev, const Tensor& cur) {
  Tape tape;
  return pair_features(tape, vae, tape.constant(prev), tape.constant(cur)).value();
}

Var lsgan_discriminator_loss(Tape& tape, Discriminator& d, Var real, const Tensor& real_onehot,
                             Var fake, const Tensor& fake_onehot, Real w_g) {
  Discriminator::WithGrad r = d.forward_with_input_grad(tape, real, real_onehot);
  Var f = d.forward(tape, fake, fake_onehot);
  Var loss = ops::add(ops::mean(ops::square(ops::add_scalar(r.out, -1))),
                      ops::mean(ops::square(ops::add_scalar(f, 1))));
  if (w_g != 0) {
    loss = ops::add(loss, ops::scale(ops::mean(ops::sum_cols(ops::square(r.input_grad))), w_g));
  }
  return loss;
}

TaskGoal goal_from_transition(const SimState& prev, const SimState& cur, int skill) {
  TaskGoal g;
  g.tag = TaskTag::Skill;
  g.heading = facing_angle(prev);
  g.speed = std::max(0.0, cur.body[0].vx * std::cos(g.heading));
  g.skill = skill;
  return g;
}

SkillLosses skill_policy_losses(Tape& tape, ControlVae& vae, Discriminator& d, Classifier& c,
                                const SkillRollouts& r, int skills, const SkillWeights& w,
                                const TaskLossConfig& loss, double w_z) {
  const int T = static_cast<int>(r.gen_mu_g.size());
  if (T < 1 || static_cast<int>(r.gen_states.size()) != T + 1 ||
      static_cast<int>(r.gen_goals.size()) != T || r.track_policy.size() != r.track_posterior.size() ||
      r.track_policy.empty()) {
    throw ConfigError("skill_policy_losses: inconsistent rollouts");
  }
  Var task, dl, cl, reg, lat;
  for (int t = 0; t < T; ++t) {
    const auto& goals = r.gen_goals[t];
    std::vector<int> labels;
    for (const TaskGoal& g : goals) labels.push_back(g.skill);
    Var lt = ops::mean(ops::task_loss(TaskTag::Skill, r.gen_states[t], r.gen_states[t + 1], goals, loss));
    Var pairs = pair_features(tape, vae, r.gen_states[t], r.gen_states[t + 1]);
    Var dt = ops::mean(ops::square(ops::add_scalar(d.forward(tape, pairs, one_hot(labels, skills)), -1)));
    Var ct = ops::mean(ops::cross_entropy(c.logits(tape, pairs), labels));
    Var zt = ops::mean(latent_regularizer(r.gen_mu_g[t]));
    task = t == 0 ? lt : ops::add(task, lt);
    dl = t == 0 ? dt : ops::add(dl, dt);
    cl = t == 0 ? ct : ops::add(cl, ct);
    lat = t == 0 ? zt : ops::add(lat, zt);
  }
  for (std::size_t t = 0; t < r.track_policy.size(); ++t) {
    Var rt = ops::mean(ops::sum_cols(ops::abs(ops::sub(r.track_posterior[t], r.track_policy[t]))));
    reg = t == 0 ? rt : ops::add(reg, rt);
  }
  Var total = ops::add(ops::scale(task, static_cast<Real>(w.task)),
                       ops::scale(dl, static_cast<Real>(w.w_d)));
  total = ops::add(total, ops::scale(cl, static_cast<Real>(w.w_c)));
  total = ops::add(total, ops::scale(reg, static_cast<Real>(w.w_r)));
  total = ops::add(total, ops::scale(lat, static_cast<Real>(w_z)));
  return {task, dl, cl, reg, total};
}

nlohmann::json SkillTrainConfig::to_json() const {
  return {{"task", task.to_json()},
          {"w_d", weights.w_d},
          {"w_c", weights.w_c},
          {"w_r", weights.w_r},
          {"task_weight", weights.task},
          {"w_g", w_g},
          {"lr_discriminator", lr_discriminator},
          {"lr_classifier", lr_classifier},
          {"disc_hidden", disc_hidden},
          {"class_hidden", class_hidden},
          {"clip_seconds", clip_seconds}};
}

SkillTrainConfig SkillTrainConfig::from_json(const nlohmann::json& j) {
  SkillTrainConfig c;
  c.task.tag = TaskTag::Skill;
  ConfigReader r(j, "skill");
  if (r.has("task")) {
    nlohmann::json t = r.at("task");
    if (!t.contains("tag")) t["tag"] = "heading";
    c.task = TaskTrainConfig::from_json(t);
  }
  r.get("w_d", c.weights.w_d)
      .get("w_c", c.weights.w_c)
      .get("w_r", c.weights.w_r)
      .get("task_weight", c.weights.task)
      .get("w_g", c.w_g)
      .get("lr_discriminator", c.lr_discriminator)
      .get("lr_classifier", c.lr_classifier)
      .get("disc_hidden", c.disc_hidden)
      .get("class_hidden", c.class_hidden)
      .get("clip_seconds", c.clip_seconds)
      .finish();
  c.task.tag = TaskTag::Skill;
  if (c.clip_seconds <= 0) throw ConfigError("skill.clip_seconds must be positive");
  return c;
}

nlohmann::json SkillIterMetrics::to_json() const {
  return {{"iteration", iteration}, {"task", task},
          {"d", d},                 {"c", c},
          {"reg", reg},             {"total", total},
          {"disc_loss", disc_loss}, {"class_loss", class_loss},
          {"class_accuracy", class_accuracy}};
}

namespace {

std::vector<MotionClip> skill_clips(const Dataset& data, double seconds,
                                    std::vector<std::string>& names) {
  std::vector<MotionClip> out;
  names = data.skills();
  for (const std::string& name : names) {
    for (const MotionClip& c : data.clips) {
      if (c.skill != name) continue;
      MotionClip seg = c;
      const int frames = std::min(c.frame_count(), static_cast<int>(std::lround(seconds * c.fps)) + 1);
      seg.frames.resize(frames);
      out.push_back(std::move(seg));
      break;
    }
  }
  if (out.empty()) throw DataError("skill control needs skill-labelled clips");
  return out;
}

GoalRanges with_skills(GoalRanges r, int k) {
  r.skills = k;
  return r;
}

}  // namespace

SkillTrainer::SkillTrainer(ControlVae& vae, WorldModel& wm, const Dataset& data,
                           const CharacterSpec& spec, const SkillTrainConfig& cfg,
                           std::uint64_t seed)
    : vae_(&vae),
      wm_(&wm),
      data_(&data),
      spec_(spec),
      cfg_(cfg),
      clips_(skill_clips(data, cfg.clip_seconds, names_)),
      init_rng_(Rng::stream(seed, "skill.init")),
      collect_rng_(Rng::stream(seed, "skill.collect")),
      train_rng_(Rng::stream(seed, "skill.train")),
      policy_("skill", goal_dim(TaskTag::Skill, static_cast<int>(clips_.size())), cfg.task.hidden,
              vae.config().latent, vae.sigma_latent(), init_rng_),
      disc_(2 * kLocalDim, static_cast<int>(clips_.size()), cfg.disc_hidden, init_rng_),
      cls_(2 * kLocalDim, static_cast<int>(clips_.size()), cfg.class_hidden, init_rng_),
      opt_policy_(policy_.parameters(), cfg.task.lr),
      opt_disc_(disc_.parameters(), cfg.lr_discriminator),
      opt_cls_(cls_.parameters(), cfg.lr_classifier),
      buffer_(cfg.task.buffer_capacity),
      env_(data, spec, TaskTag::Skill, with_skills(cfg.task.goals, static_cast<int>(clips_.size())),
           cfg.task.goal_period, cfg.task.max_episode, Rng::stream(seed, "skill.env").next_u64()) {
  cfg_.task.tag = TaskTag::Skill;
  cfg_.task.goals.skills = skills();
  cfg_.task.validate();
  for (const MotionClip& c : clips_) {
    if (c.frame_count() < cfg.task.horizon + 1) {
      throw DataError("skill clip '" + c.name + "' is shorter than the training horizon");
    }
  }
}

SkillIterMetrics SkillTrainer::iterate() {
  const int K = skills(), B = cfg_.task.batch, T = cfg_.task.horizon;
  const int latent = vae_->config().latent;
  collect_steps(*vae_, policy_, env_, buffer_, std::max(cfg_.task.collect_steps, buffer_.size() ? 0 : 1),
                T, K, collect_rng_);

  SkillIterMetrics m;
  m.iteration = it_;
  opt_policy_.set_lr(task_learning_rate(it_, cfg_.task));

  // "real" rollouts: posterior tracking of skill clips in the world model
  std::vector<int> track_skill(B);
  std::vector<std::vector<SimState>> track_states(T + 1, std::vector<SimState>(B));
  std::vector<Tensor> track_refs(T);
  {
    std::vector<int> frame(B);
    for (int i = 0; i < B; ++i) {
      track_skill[i] = train_rng_.uniform_int(K);
      frame[i] = train_rng_.uniform_int(clips_[track_skill[i]].frame_count() - T);
      track_states[0][i] = clips_[track_skill[i]].frames[frame[i]];
    }
    for (int t = 0; t < T; ++t) {
      std::vector<LocalState> refs;
      for (int i = 0; i < B; ++i) refs.push_back(to_local(clips_[track_skill[i]].frames[frame[i] + t + 1]));
      track_refs[t] = locals_to_tensor(refs);
    }
  }

  ParameterList params = policy_.parameters();
  zero_grads(params);
  Tensor gen_prev_all, gen_next_all;
  std::vector<int> gen_labels;
  {
    Tape tape;
    ParameterList frozen = frozen_upstream(*vae_, *wm_);
    for (ParameterList p : {disc_.parameters(), cls_.parameters()}) {
      frozen.insert(frozen.end(), p.begin(), p.end());
    }
    tape.freeze(frozen);

    SkillRollouts r;
    Var s = tape.constant(states_to_tensor(track_states[0]));
    for (int t = 0; t < T; ++t) {
      Var ns = vae_->normalize(tape, ops::state_to_local(s));
      Var nref = vae_->normalize(tape, tape.constant(track_refs[t]));
      ControlVae::Latent L = vae_->posterior_sample(tape, ns, nref, Tensor(B, latent));
      Var next = wm_->predict(tape, s, vae_->policy_mean(tape, ns, L.z));
      if (!next.value().all_finite()) {
        throw NumericError("skill tracking rollout: non-finite state at step " + std::to_string(t));
      }
      std::vector<TaskGoal> g;
      for (int i = 0; i < B; ++i) {
        track_states[t + 1][i] = tensor_to_state(next.value(), i);
        g.push_back(goal_from_transition(track_states[t][i], track_states[t + 1][i], track_skill[i]));
      }
      Var mu_g = policy_.residual(tape, ns, tape.constant(goals_to_tensor(g, K)));
      r.track_posterior.push_back(tape.constant(L.z.value()));
      r.track_policy.push_back(ops::add(L.mu_p, mu_g));
      s = tape.constant(next.value());
    }

    auto batch = sample_entries(buffer_, B, train_rng_);
    Rollout gen = policy_rollout(tape, *vae_, *wm_, policy_, batch, T, K, train_rng_);
    r.gen_states = gen.states;
    r.gen_goals = gen.goals;
    r.gen_mu_g = gen.mu_g;
    SkillLosses l = skill_policy_losses(tape, *vae_, disc_, cls_, r, K, cfg_.weights,
                                        cfg_.task.loss, cfg_.task.w_z);
    m.task = l.task.value()(0, 0) / T;
    m.d = l.d.value()(0, 0) / T;
    m.c = l.c.value()(0, 0) / T;
    m.reg = l.reg.value()(0, 0) / T;
    m.total = l.total.value()(0, 0);

    // generated pairs for the discriminator and the accuracy audit
    std::vector<Tensor> prev, next;
    for (int t = 0; t < T; ++t) {
      prev.push_back(gen.states[t].value());
      next.push_back(gen.states[t + 1].value());
      for (const TaskGoal& g : gen.goals[t]) gen_labels.push_back(g.skill);
    }
    gen_prev_all = vstack(prev);
    gen_next_all = vstack(next);
    tape.backward(l.total);
  }
  clip_gradients(params, cfg_.task.clip);
  opt_policy_.step(params);

  std::vector<SimState> real_prev, real_next;
  std::vector<int> real_labels;
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < B; ++i) {
      real_prev.push_back(track_states[t][i]);
      real_next.push_back(track_states[t + 1][i]);
      real_labels.push_back(track_skill[i]);
    }
  }
  const Tensor real_pairs = pair_features(*vae_, states_to_tensor(real_prev), states_to_tensor(real_next));
  const Tensor fake_pairs = pair_features(*vae_, gen_prev_all, gen_next_all);

  ParameterList dp = disc_.parameters();
  zero_grads(dp);
  {
    Tape tape;
    Var loss = lsgan_discriminator_loss(tape, disc_, tape.constant(real_pairs),
                                        one_hot(real_labels, K), tape.constant(fake_pairs),
                                        one_hot(gen_labels, K), static_cast<Real>(cfg_.w_g));
    m.disc_loss = loss.value()(0, 0);
    tape.backward(loss);
  }
  clip_gradients(dp, cfg_.task.clip);
  opt_disc_.step(dp);

  ParameterList cp = cls_.parameters();
  zero_grads(cp);
  {
    Tape tape;
    Var loss = ops::mean(ops::cross_entropy(cls_.logits(tape, tape.constant(real_pairs)), real_labels));
    m.class_loss = loss.value()(0, 0);
    tape.backward(loss);
  }
  clip_gradients(cp, cfg_.task.clip);
  opt_cls_.step(cp);

  const Tensor p = cls_.probabilities(fake_pairs);
  int hit = 0;
  for (int i = 0; i < p.rows; ++i) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (p(i, k) > p(i, best)) best = k;
    hit += best == gen_labels[i];
  }
  m.class_accuracy = static_cast<double>(hit) / p.rows;
  ++it_;
  return m;
}

CONTROLVAE_NAMESPACE_END
