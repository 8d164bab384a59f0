#include "controlvae/cvae.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>

#include "controlvae/checkpoint.hpp"
#include "controlvae/json_config.hpp"

CONTROLVAE_NAMESPACE_BEGIN

namespace {

constexpr Real kStateStdFloor = Real(0.1);
constexpr Real kOutputInitScale = Real(0.1);

Tensor local_row(const LocalState& s) {
  return locals_to_tensor(std::span<const LocalState>(&s, 1));
}

nlohmann::json recon_to_json(const ReconWeights& w) {
  return {{"pos", w.pos},       {"rot", w.rot},       {"vel", w.vel},
          {"ang_vel", w.ang_vel}, {"height", w.height}, {"up", w.up}};
}

ReconWeights recon_from_json(const nlohmann::json& j) {
  ReconWeights w;
  ConfigReader r(j, "cvae.recon");
  r.get("pos", w.pos).get("rot", w.rot).get("vel", w.vel).get("ang_vel", w.ang_vel)
      .get("height", w.height).get("up", w.up);
  r.finish();
  return w;
}

nlohmann::json termination_to_json(const TerminationConfig& t) {
  return {{"max_length", t.max_length},
          {"max_head_error", t.max_head_error},
          {"max_error_steps", t.max_error_steps}};
}

TerminationConfig termination_from_json(const nlohmann::json& j) {
  TerminationConfig t;
  ConfigReader r(j, "cvae.termination");
  r.get("max_length", t.max_length)
      .get("max_head_error", t.max_head_error)
      .get("max_error_steps", t.max_error_steps);
  r.finish();
  return t;
}

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

void CvaeConfig::validate() const {
  auto positive = [](const std::vector<int>& v) {
    return !v.empty() && std::all_of(v.begin(), v.end(), [](int x) { return x > 0; });
  };
  if (latent < 1) throw ConfigError("cvae.latent must be >= 1");
  if (!positive(prior_hidden) || !positive(posterior_hidden) || !positive(policy_hidden) ||
      !positive(gate_hidden)) {
    throw ConfigError("cvae: hidden layer lists must be non-empty and positive");
  }
  if (experts < 1) throw ConfigError("cvae.experts must be >= 1");
  if (!(sigma_p > 0) || !(sigma_pi >= 0)) throw ConfigError("cvae: sigma_p > 0, sigma_pi >= 0");
  if (!(gamma > 0 && gamma < 1)) throw ConfigError("cvae.gamma must be in (0, 1)");
  if (!(beta_min >= 0 && beta_min <= beta_max)) throw ConfigError("cvae: need 0 <= beta_min <= beta_max");
  if (beta_period < 1 || beta_windows < 1) throw ConfigError("cvae: beta_period and beta_windows >= 1");
  if (horizon < 1 || batch < 1 || updates < 0) throw ConfigError("cvae: horizon/batch >= 1, updates >= 0");
  if (w_a1 < 0 || w_a2 < 0) throw ConfigError("cvae: action weights must be >= 0");
  if (!(lr_prior > 0 && lr_posterior > 0 && lr_policy > 0)) throw ConfigError("cvae: learning rates must be > 0");
  if (!(prior_prob >= 0 && prior_prob <= 1)) throw ConfigError("cvae.prior_prob must be in [0, 1]");
  if (!(switch_prob >= 0 && switch_prob <= 1)) throw ConfigError("cvae.switch_prob must be in [0, 1]");
  if (!(reward_temperature > 0)) throw ConfigError("cvae.reward_temperature must be > 0");
  if (termination.max_length < 1) throw ConfigError("cvae.termination.max_length must be >= 1");
  if (buffer_capacity < 1 || staging < 1) throw ConfigError("cvae: buffer sizes must be >= 1");
  if (value_period < 1) throw ConfigError("cvae.value_period must be >= 1");
  if (!(value_alpha > 0 && value_alpha <= 1)) throw ConfigError("cvae.value_alpha must be in (0, 1]");
}

nlohmann::json CvaeConfig::to_json() const {
  return {{"latent", latent},
          {"prior_hidden", prior_hidden},
          {"posterior_hidden", posterior_hidden},
          {"policy_hidden", policy_hidden},
          {"gate_hidden", gate_hidden},
          {"experts", experts},
          {"sigma_p", sigma_p},
          {"sigma_pi", sigma_pi},
          {"standard_prior", standard_prior},
          {"gamma", gamma},
          {"beta_min", beta_min},
          {"beta_max", beta_max},
          {"beta_period", beta_period},
          {"beta_windows", beta_windows},
          {"horizon", horizon},
          {"batch", batch},
          {"updates", updates},
          {"w_a1", w_a1},
          {"w_a2", w_a2},
          {"l2_only", l2_only},
          {"lr_prior", lr_prior},
          {"lr_posterior", lr_posterior},
          {"lr_policy", lr_policy},
          {"clip", clip == ClipMode::Elementwise ? "elementwise" : "global_norm"},
          {"recon", recon_to_json(recon)},
          {"prior_prob", prior_prob},
          {"switch_prob", switch_prob},
          {"reference_switch", reference_switch},
          {"reward_temperature", reward_temperature},
          {"termination", termination_to_json(termination)},
          {"buffer_capacity", buffer_capacity},
          {"staging", staging},
          {"value_period", value_period},
          {"value_alpha", value_alpha}};
}

CvaeConfig CvaeConfig::from_json(const nlohmann::json& j) {
  CvaeConfig c;
  ConfigReader r(j, "cvae");
  std::string clip = "elementwise";
  r.get("latent", c.latent)
      .get("prior_hidden", c.prior_hidden)
      .get("posterior_hidden", c.posterior_hidden)
      .get("policy_hidden", c.policy_hidden)
      .get("gate_hidden", c.gate_hidden)
      .get("experts", c.experts)
      .get("sigma_p", c.sigma_p)
      .get("sigma_pi", c.sigma_pi)
      .get("standard_prior", c.standard_prior)
      .get("gamma", c.gamma)
      .get("beta_min", c.beta_min)
      .get("beta_max", c.beta_max)
      .get("beta_period", c.beta_period)
      .get("beta_windows", c.beta_windows)
      .get("horizon", c.horizon)
      .get("batch", c.batch)
      .get("updates", c.updates)
      .get("w_a1", c.w_a1)
      .get("w_a2", c.w_a2)
      .get("l2_only", c.l2_only)
      .get("lr_prior", c.lr_prior)
      .get("lr_posterior", c.lr_posterior)
      .get("lr_policy", c.lr_policy)
      .get("clip", clip)
      .get("prior_prob", c.prior_prob)
      .get("switch_prob", c.switch_prob)
      .get("reference_switch", c.reference_switch)
      .get("reward_temperature", c.reward_temperature)
      .get("buffer_capacity", c.buffer_capacity)
      .get("staging", c.staging)
      .get("value_period", c.value_period)
      .get("value_alpha", c.value_alpha);
  if (r.has("recon")) c.recon = recon_from_json(r.at("recon"));
  if (r.has("termination")) c.termination = termination_from_json(r.at("termination"));
  r.finish();
  if (clip == "elementwise") {
    c.clip = ClipMode::Elementwise;
  } else if (clip == "global_norm") {
    c.clip = ClipMode::GlobalNorm;
  } else {
    throw ConfigError("cvae.clip must be 'elementwise' or 'global_norm'");
  }
  c.validate();
  return c;
}

double beta_at(int epoch, const CvaeConfig& cfg) {
  if (epoch < 0) throw ConfigError("beta_at: negative epoch");
  if (cfg.beta_windows <= 1) return cfg.beta_max;
  const int k = std::min(epoch / cfg.beta_period, cfg.beta_windows - 1);
  return cfg.beta_min + (cfg.beta_max - cfg.beta_min) * k / (cfg.beta_windows - 1);
}

Var kl_term(Var mu_q, Real sigma) {
  if (!(sigma > 0)) throw ConfigError("kl_term: sigma must be positive");
  return ops::scale(ops::sum_cols(ops::square(mu_q)), Real(0.5) / (sigma * sigma));
}

double kl_term(std::span<const double> mu_q, double sigma) {
  if (!(sigma > 0)) throw ConfigError("kl_term: sigma must be positive");
  double s = 0;
  for (double v : mu_q) s += v * v;
  return s / (2 * sigma * sigma);
}

ControlVae::ControlVae(const CvaeConfig& cfg, Rng& rng) : cfg_(cfg), norm_("cvae.state", kLocalDim) {
  cfg_.validate();
  prior_ = DenseNet("prior", DenseConfig{kLocalDim, kLocalDim, cfg_.prior_hidden, cfg_.latent, true, false},
                    rng);
  posterior_ = DenseNet(
      "posterior",
      DenseConfig{2 * kLocalDim, kLocalDim, cfg_.posterior_hidden, cfg_.latent, true, false}, rng);
  policy_ = MoENet("policy",
                   MoEConfig{kLocalDim, cfg_.latent, cfg_.policy_hidden, kActionDim, cfg_.experts,
                             cfg_.gate_hidden, true},
                   rng);
  // start with small latents and actions; large initial outputs make the
  // first collected trajectories violent enough to stall the world model
  prior_.scale_output_layer(kOutputInitScale);
  posterior_.scale_output_layer(kOutputInitScale);
  for (int k = 0; k < policy_.expert_count(); ++k) policy_.expert(k).scale_output_layer(kOutputInitScale);
}

void ControlVae::fit_normalizer(const Dataset& data) {
  std::vector<LocalState> locals;
  for (const MotionClip& c : data.clips)
    for (const SimState& s : c.frames) locals.push_back(to_local(s));
  if (locals.empty()) throw DataError("cannot fit the state normalizer on an empty dataset");
  norm_.fit(locals_to_tensor(locals), kStateStdFloor);
}

Var ControlVae::prior_mean(Tape& tape, Var ns) {
  if (cfg_.standard_prior) return tape.constant(Tensor(ns.rows(), cfg_.latent));
  return prior_.forward(tape, ns, ns);
}

Var ControlVae::posterior_residual(Tape& tape, Var ns, Var nref) {
  return posterior_.forward(tape, ops::concat_cols(ns, nref), nref);
}

Var ControlVae::policy_mean(Tape& tape, Var ns, Var z) { return policy_.forward(tape, ns, z); }

ControlVae::Latent ControlVae::prior_sample(Tape& tape, Var ns, const Tensor& noise) {
  Latent l;
  l.mu_p = prior_mean(tape, ns);
  l.z = reparam_sample(tape, l.mu_p, sigma_latent(), noise);
  return l;
}

ControlVae::Latent ControlVae::posterior_sample(Tape& tape, Var ns, Var nref, const Tensor& noise) {
  Latent l;
  l.mu_p = prior_mean(tape, ns);
  l.mu_q = posterior_residual(tape, ns, nref);
  l.z = reparam_sample(tape, ops::add(l.mu_p, l.mu_q), sigma_latent(), noise);
  return l;
}

Var ControlVae::policy_sample(Tape& tape, Var ns, Var z, const Tensor& noise) {
  return reparam_sample(tape, policy_mean(tape, ns, z), static_cast<Real>(cfg_.sigma_pi), noise);
}

Tensor ControlVae::prior_sample(const LocalState& s, Rng& rng) {
  Tape tape;
  Var ns = normalize(tape, tape.constant(local_row(s)));
  return prior_sample(tape, ns, normal_tensor(1, cfg_.latent, rng)).z.value();
}

Tensor ControlVae::posterior_sample(const LocalState& s, const LocalState& ref, Rng& rng) {
  Tape tape;
  Var ns = normalize(tape, tape.constant(local_row(s)));
  Var nr = normalize(tape, tape.constant(local_row(ref)));
  return posterior_sample(tape, ns, nr, normal_tensor(1, cfg_.latent, rng)).z.value();
}

Action ControlVae::policy_act(const LocalState& s, const Tensor& z, Rng& rng, bool deterministic) {
  Tape tape;
  Var ns = normalize(tape, tape.constant(local_row(s)));
  Var zz = tape.constant(z);
  Var a = deterministic ? policy_mean(tape, ns, zz)
                        : policy_sample(tape, ns, zz, normal_tensor(1, kActionDim, rng));
  return tensor_to_action(a.value());
}

ParameterList ControlVae::parameters() {
  ParameterList p = norm_.parameters();
  for (auto* list : {&prior_, &posterior_}) {
    ParameterList q = list->parameters();
    p.insert(p.end(), q.begin(), q.end());
  }
  ParameterList q = policy_.parameters();
  p.insert(p.end(), q.begin(), q.end());
  return p;
}

VaeBatch sample_vae_batch(const RolloutBuffer& buffer, const Dataset& data, int horizon,
                          int batch, Rng& rng) {
  if (horizon < 1 || batch < 1) throw ConfigError("sample_vae_batch: horizon and batch >= 1");
  VaeBatch b;
  std::vector<SimState> start(batch);
  b.ref.assign(horizon, Tensor(batch, kLocalDim));
  b.mask.assign(horizon, Tensor(batch, 1));
  for (int i = 0; i < batch; ++i) {
    const auto [tr, t] = buffer.sample_window(1, rng);
    const Trajectory& traj = buffer.trajectories()[tr];
    start[i] = shift_x(traj.states[t], -traj.states[t].body[0].x);
    const FrameRef& r = traj.refs[t];
    if (r.clip < 0 || r.clip >= data.size()) throw DataError("buffer reference names a missing clip");
    const MotionClip& clip = data.clips[r.clip];
    for (int k = 0; k < horizon; ++k) {
      const int f = r.frame + k + 1;
      const bool ok = f < clip.frame_count();
      const LocalState l = to_local(clip.frames[ok ? f : clip.frame_count() - 1]);
      std::copy(l.begin(), l.end(), b.ref[k].row_ptr(i));
      b.mask[k](i, 0) = ok ? Real(1) : Real(0);
    }
  }
  b.start = states_to_tensor(start);
  return b;
}

ElboLosses elbo_losses(Tape& tape, ControlVae& vae, WorldModel& wm, const VaeBatch& batch,
                       Rng& rng) {
  const CvaeConfig& cfg = vae.config();
  const int T = static_cast<int>(batch.ref.size());
  const int B = batch.start.rows;
  if (T < 1 || batch.mask.size() != batch.ref.size()) throw ConfigError("elbo_losses: bad batch");
  tape.freeze(wm.parameters());

  std::array<double, kLocalDim> wv = local_weight_vector(cfg.recon);
  Tensor wrow(1, kLocalDim);
  for (int k = 0; k < kLocalDim; ++k) wrow(0, k) = static_cast<Real>(wv[k]);

  Var s = tape.constant(batch.start);
  Var rec, kl, act;
  double disc = 1;
  for (int t = 0; t < T; ++t) {
    Tensor m = batch.mask[t];
    for (Real& v : m.data) v *= static_cast<Real>(disc);

    Var ns = vae.normalize(tape, ops::state_to_local(s));
    Var nref = vae.normalize(tape, tape.constant(batch.ref[t]));
    ControlVae::Latent L =
        vae.posterior_sample(tape, ns, nref, normal_tensor(B, cfg.latent, rng));
    Var a = vae.policy_sample(tape, ns, L.z, normal_tensor(B, kActionDim, rng));
    s = wm.predict(tape, s, a);
    if (!s.value().all_finite()) {
      throw NumericError("elbo_losses: non-finite state at step " + std::to_string(t));
    }

    Tensor neg_ref = batch.ref[t];
    for (Real& v : neg_ref.data) v = -v;
    Var diff = ops::abs(ops::add_const(ops::state_to_local(s), neg_ref));
    Var rec_t = ops::mul_const(ops::sum_cols(ops::mul_const(diff, wrow)), m);
    Var kl_t = ops::mul_const(kl_term(L.mu_q, vae.sigma_latent()), m);
    Var act_t = ops::scale(ops::sum_cols(ops::square(a)), static_cast<Real>(cfg.w_a2));
    if (!cfg.l2_only && cfg.w_a1 > 0) {
      act_t = ops::add(act_t, ops::scale(ops::sum_cols(ops::abs(a)), static_cast<Real>(cfg.w_a1)));
    }
    act_t = ops::mul_const(act_t, m);

    rec = t == 0 ? rec_t : ops::add(rec, rec_t);
    kl = t == 0 ? kl_t : ops::add(kl, kl_t);
    act = t == 0 ? act_t : ops::add(act, act_t);
    disc *= cfg.gamma;
  }
  return {ops::mean(rec), ops::mean(kl), ops::mean(act)};
}

VaeOptimizers make_vae_optimizers(ControlVae& vae) {
  const CvaeConfig& c = vae.config();
  return {RAdam(vae.prior_parameters(), c.lr_prior),
          RAdam(vae.posterior_parameters(), c.lr_posterior),
          RAdam(vae.policy_parameters(), c.lr_policy)};
}

VaeStepResult vae_step(ControlVae& vae, VaeOptimizers& opt, WorldModel& wm,
                       const VaeBatch& batch, double beta, Rng& rng) {
  const ParameterList pp = vae.prior_parameters(), pq = vae.posterior_parameters(),
                      pi = vae.policy_parameters();
  zero_grads(pp);
  zero_grads(pq);
  zero_grads(pi);
  Tape tape;
  ElboLosses l = elbo_losses(tape, vae, wm, batch, rng);
  Var total = ops::add(ops::add(l.rec, ops::scale(l.kl, static_cast<Real>(beta))), l.act);
  VaeStepResult r{l.rec.value()(0, 0), l.kl.value()(0, 0), l.act.value()(0, 0),
                  total.value()(0, 0)};
  if (!std::isfinite(r.total)) throw NumericError("ControlVAE loss is not finite");
  tape.backward(total);
  const ClipMode mode = vae.config().clip;
  clip_gradients(pp, mode);
  clip_gradients(pq, mode);
  clip_gradients(pi, mode);
  if (!vae.config().standard_prior) opt.prior.step(pp);
  opt.posterior.step(pq);
  opt.policy.step(pi);
  return r;
}

Trajectory collect_one(ControlVae& vae, const Dataset& data, int clip_index, int frame,
                       const CharacterSpec& spec, const CvaeConfig& cfg, Rng& rng,
                       CollectStats* stats) {
  CollectStats local;
  CollectStats& st = stats ? *stats : local;
  int c = clip_index, f = frame;
  double xoff = 0;
  const MotionClip* clip = &data.clips.at(c);
  if (f < 0 || f >= clip->frame_count()) throw DataError("collect: start frame out of range");

  Trajectory tr;
  SimState s = clip->frames[f];
  tr.states.push_back(s);
  tr.refs.push_back({c, f, 0});
  tr.rewards.push_back(1.0);
  TerminationTracker term(cfg.termination);
  while (tr.transitions() < cfg.termination.max_length) {
    const bool at_end = f + 1 >= clip->frame_count();
    if (at_end && !cfg.reference_switch) break;
    if (at_end || (cfg.reference_switch && rng.bernoulli(cfg.switch_prob))) {
      c = rng.uniform_int(data.size());
      clip = &data.clips[c];
      if (clip->frame_count() < 2) throw DataError("collect: clip '" + clip->name + "' is too short");
      f = rng.uniform_int(clip->frame_count() - 1);
      xoff = s.body[0].x - clip->frames[f].body[0].x;
      ++st.switches;
    }
    const SimState ref_next = shift_x(clip->frames[f + 1], xoff);
    const LocalState ls = to_local(s), lr = to_local(ref_next);
    Tensor z;
    if (rng.bernoulli(cfg.prior_prob)) {
      z = vae.prior_sample(ls, rng);
      ++st.prior_draws;
    } else {
      z = vae.posterior_sample(ls, lr, rng);
      ++st.posterior_draws;
    }
    const Action a = vae.policy_act(ls, z, rng, false);
    s = step(s, a, spec);
    ++f;
    const double r = reward(to_local(s), lr, cfg.recon, cfg.reward_temperature);
    tr.actions.push_back(a);
    tr.states.push_back(s);
    tr.refs.push_back({c, f, xoff});
    tr.rewards.push_back(r);
    if (term.update(distance(head_position(s, spec), head_position(ref_next, spec)))) {
      tr.fell = term.consecutive() > cfg.termination.max_error_steps;
      break;
    }
  }
  return tr;
}

CollectStats collect_trajectories(ControlVae& vae, const Dataset& data, const ValueTable& values,
                                  RolloutBuffer& buffer, const CharacterSpec& spec,
                                  const CvaeConfig& cfg, Rng& rng, int workers) {
  if (data.empty()) throw DataError("collect_trajectories: empty dataset");
  workers = std::max(1, workers);
  const std::uint64_t base = rng.next_u64();
  {
    // builds the sampling cache before the threads share the table
    Rng warm(0);
    values.sample(warm);
  }
  CollectStats total;
  double reward_sum = 0;
  std::uint64_t next = 0;
  while (!buffer.staging_full()) {
    std::vector<std::optional<Trajectory>> out(workers);
    std::vector<CollectStats> st(workers);
    std::vector<std::exception_ptr> err(workers);
#pragma omp parallel for num_threads(workers) schedule(static, 1)
    for (int k = 0; k < workers; ++k) {
      try {
        Rng r(splitmix64(base + next + static_cast<std::uint64_t>(k)));
        const auto [c, f] = values.sample(r);
        out[k] = collect_one(vae, data, c, f, spec, cfg, r, &st[k]);
      } catch (const SimulationDiverged&) {
        st[k].diverged = 1;
      } catch (...) {
        err[k] = std::current_exception();
      }
    }
    for (int k = 0; k < workers && !buffer.staging_full(); ++k) {
      if (err[k]) std::rethrow_exception(err[k]);
      total.diverged += st[k].diverged;
      total.prior_draws += st[k].prior_draws;
      total.posterior_draws += st[k].posterior_draws;
      total.switches += st[k].switches;
      if (!out[k]) continue;
      ++total.trajectories;
      total.transitions += out[k]->transitions();
      for (std::size_t i = 1; i < out[k]->rewards.size(); ++i) reward_sum += out[k]->rewards[i];
      buffer.stage(std::move(*out[k]));
    }
    next += static_cast<std::uint64_t>(workers);
    if (total.diverged > 1000) throw NumericError("collection: simulator keeps diverging");
  }
  total.mean_reward = total.transitions > 0 ? reward_sum / total.transitions : 0.0;
  buffer.merge();
  return total;
}

void refresh_values(ValueTable& values, const RolloutBuffer& buffer, double gamma) {
  for (const Trajectory& t : buffer.trajectories()) {
    const FrameRef& last = t.refs.back();
    double boot = 0;
    if (!t.fell) {
      const int f = std::min(last.frame + 1, values.frame_count(last.clip) - 1);
      boot = values.value(last.clip, f);
    }
    update_values(values, t.rewards, t.refs, gamma, boot);
  }
}

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch},
          {"beta", beta},
          {"wm_loss", wm_loss},
          {"rec", rec},
          {"kl", kl},
          {"act", act},
          {"total", total},
          {"reward", reward},
          {"trajectories", trajectories},
          {"transitions", transitions},
          {"diverged", diverged},
          {"buffer_states", buffer_states},
          {"values_refreshed", values_refreshed}};
}

TrainState::TrainState(const CharacterSpec& spec_, const CvaeConfig& cfg_,
                       const WorldModelConfig& wm_cfg_, const Dataset& data, std::uint64_t seed)
    : spec(spec_), cfg(cfg_), wm_cfg(wm_cfg_) {
  spec.validate();
  cfg.validate();
  if (data.empty()) throw DataError("training needs a non-empty dataset");
  Rng init_vae = Rng::stream(seed, "cvae.init");
  Rng init_wm = Rng::stream(seed, "wm.init");
  vae = ControlVae(cfg, init_vae);
  vae.fit_normalizer(data);
  wm = WorldModel(wm_cfg, spec.control_dt(), init_wm);
  std::vector<SimState> from, to;
  for (const MotionClip& c : data.clips)
    for (int i = 0; i + 1 < c.frame_count(); ++i) {
      from.push_back(c.frames[i]);
      to.push_back(c.frames[i + 1]);
    }
  if (from.empty()) throw DataError("dataset has no transitions");
  wm.fit_normalizers(from, to);
  vae_opt = make_vae_optimizers(vae);
  wm_opt = RAdam(wm.parameters(), wm_cfg.lr);
  values = ValueTable(data, cfg.value_alpha);
  buffer = RolloutBuffer(cfg.buffer_capacity, cfg.staging);
  collect_rng = Rng::stream(seed, "collect");
  wm_rng = Rng::stream(seed, "wm.train");
  vae_rng = Rng::stream(seed, "vae.train");
}

void TrainState::save(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const nlohmann::json meta = {{"epoch", epoch}};
  save_checkpoint(dir + "/prior.ckpt", vae.prior_parameters(), &vae_opt.prior, meta);
  save_checkpoint(dir + "/posterior.ckpt", vae.posterior_parameters(), &vae_opt.posterior, meta);
  save_checkpoint(dir + "/policy.ckpt", vae.policy_parameters(), &vae_opt.policy, meta);
  save_checkpoint(dir + "/normalizer.ckpt", vae.normalizer_parameters(), nullptr, meta);
  save_checkpoint(dir + "/world_model.ckpt", wm.parameters(), &wm_opt, meta);
  buffer.save(dir + "/buffer.bin");
  nlohmann::json st = {{"epoch", epoch},
                       {"values", values.to_json()},
                       {"collect_rng", collect_rng.serialize()},
                       {"wm_rng", wm_rng.serialize()},
                       {"vae_rng", vae_rng.serialize()}};
  const std::string path = dir + "/state.json";
  {
    std::ofstream out(path + ".tmp");
    if (!out) throw IoError("cannot write '" + path + ".tmp'");
    out << st.dump(1) << "\n";
    if (!out) throw IoError("write failed for '" + path + ".tmp'");
  }
  std::error_code ec;
  fs::rename(path + ".tmp", path, ec);
  if (ec) throw IoError("cannot rename into '" + path + "': " + ec.message());
}

void TrainState::load(const std::string& dir) {
  load_checkpoint(dir + "/prior.ckpt", vae.prior_parameters(), &vae_opt.prior);
  load_checkpoint(dir + "/posterior.ckpt", vae.posterior_parameters(), &vae_opt.posterior);
  load_checkpoint(dir + "/policy.ckpt", vae.policy_parameters(), &vae_opt.policy);
  load_checkpoint(dir + "/normalizer.ckpt", vae.normalizer_parameters());
  load_checkpoint(dir + "/world_model.ckpt", wm.parameters(), &wm_opt);
  buffer.load(dir + "/buffer.bin");
  const std::string path = dir + "/state.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json st;
  try {
    in >> st;
    epoch = st.at("epoch").get<int>();
    values = ValueTable::from_json(st.at("values"));
    collect_rng.deserialize(st.at("collect_rng").get<std::string>());
    wm_rng.deserialize(st.at("wm_rng").get<std::string>());
    vae_rng.deserialize(st.at("vae_rng").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "': " + e.what());
  }
}

EpochMetrics train_epoch(TrainState& state, const Dataset& data) {
  TrainState backup = state;
  try {
    EpochMetrics m;
    m.epoch = state.epoch;
    m.beta = beta_at(state.epoch, state.cfg);
    const CollectStats cs =
        collect_trajectories(state.vae, data, state.values, state.buffer, state.spec, state.cfg,
                             state.collect_rng, state.workers);
    m.reward = cs.mean_reward;
    m.trajectories = cs.trajectories;
    m.transitions = cs.transitions;
    m.diverged = cs.diverged;
    m.buffer_states = state.buffer.stored_states();

    if (state.buffer.window_count(state.wm_cfg.horizon) > 0) {
      m.wm_loss = train_world_model(state.wm, state.wm_opt, state.buffer, state.wm_rng);
    }
    const int U = state.cfg.updates;
    for (int u = 0; u < U; ++u) {
      const VaeBatch b =
          sample_vae_batch(state.buffer, data, state.cfg.horizon, state.cfg.batch, state.vae_rng);
      const VaeStepResult r = vae_step(state.vae, state.vae_opt, state.wm, b, m.beta, state.vae_rng);
      m.rec += r.rec / U;
      m.kl += r.kl / U;
      m.act += r.act / U;
      m.total += r.total / U;
    }
    if ((state.epoch + 1) % state.cfg.value_period == 0) {
      refresh_values(state.values, state.buffer, state.cfg.gamma);
      m.values_refreshed = true;
    }
    ++state.epoch;
    return m;
  } catch (...) {
    state = std::move(backup);
    throw;
  }
}

TrackingResult track_clip(ControlVae& vae, const MotionClip& clip, const CharacterSpec& spec,
                          const CvaeConfig& cfg, int steps, Rng& rng, bool deterministic) {
  if (steps < 0 || steps >= clip.frame_count()) {
    throw ConfigError("track_clip: clip '" + clip.name + "' has fewer than " +
                      std::to_string(steps + 1) + " frames");
  }
  TrackingResult r;
  SimState s = clip.frames[0];
  r.states.push_back(s);
  r.root_error.push_back(0);
  r.reward.push_back(1);
  const int latent = vae.config().latent;
  for (int t = 0; t < steps; ++t) {
    const LocalState ls = to_local(s), lr = to_local(clip.frames[t + 1]);
    Tensor z;
    if (deterministic) {
      Tape tape;
      Var ns = vae.normalize(tape, tape.constant(local_row(ls)));
      Var nr = vae.normalize(tape, tape.constant(local_row(lr)));
      z = vae.posterior_sample(tape, ns, nr, Tensor(1, latent)).z.value();
    } else {
      z = vae.posterior_sample(ls, lr, rng);
    }
    const Action a = vae.policy_act(ls, z, rng, deterministic);
    try {
      s = step(s, a, spec);
    } catch (const SimulationDiverged&) {
      r.fell = true;
      break;
    }
    const BodyState& p = s.body[0];
    const BodyState& q = clip.frames[t + 1].body[0];
    r.states.push_back(s);
    r.root_error.push_back(std::hypot(p.x - q.x, p.y - q.y));
    r.reward.push_back(reward(to_local(s), lr, cfg.recon, cfg.reward_temperature));
    ++r.steps;
    if (p.y < 0.5) r.fell = true;
  }
  return r;
}

std::vector<SimState> random_walk(ControlVae& vae, const SimState& start,
                                  const CharacterSpec& spec, int steps, Rng& rng, bool* fell) {
  std::vector<SimState> out{start};
  bool down = false;
  SimState s = start;
  for (int t = 0; t < steps; ++t) {
    const LocalState ls = to_local(s);
    const Tensor z = vae.prior_sample(ls, rng);
    const Action a = vae.policy_act(ls, z, rng, true);
    try {
      s = step(s, a, spec);
    } catch (const SimulationDiverged&) {
      down = true;
      break;
    }
    out.push_back(s);
    if (s.body[0].y < 0.5) down = true;
  }
  if (fell) *fell = down;
  return out;
}

CONTROLVAE_NAMESPACE_END
