#include "gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

#include "controlvae/highlevel.hpp"

namespace gradcheck {

using namespace controlvae;

namespace {

static_assert(sizeof(Real) == 8, "gradient checks need the 64-bit build");

using Builder = std::function<Var(Tape&)>;

Tensor random_tensor(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (Real& v : t.data) v = rng.normal() * scale;
  return t;
}

// Inputs are wrapped as parameters so they are checked like weights.
Parameter input(const std::string& name, Tensor v) { return Parameter(name, std::move(v)); }

double eval(const Builder& build) {
  Tape tape;
  return build(tape).value()(0, 0);
}

void compare(const ParameterList& params, const Builder& build, Rng& pick, const Settings& s,
             CaseResult& out) {
  zero_grads(params);
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    const int n = static_cast<int>(p->value.size());
    std::vector<int> idx;
    if (n <= s.entries_per_tensor) {
      for (int i = 0; i < n; ++i) idx.push_back(i);
    } else {
      while (static_cast<int>(idx.size()) < s.entries_per_tensor) {
        const int i = pick.uniform_int(n);
        if (std::find(idx.begin(), idx.end(), i) == idx.end()) idx.push_back(i);
      }
    }
    for (int i : idx) {
      const double analytic = p->grad.data[i];
      const Real orig = p->value.data[i];
      p->value.data[i] = orig + s.step;
      const double up = eval(build);
      p->value.data[i] = orig - s.step;
      const double down = eval(build);
      p->value.data[i] = orig;
      const double numeric = (up - down) / (2 * s.step);
      const double rel = std::fabs(analytic - numeric) /
                         std::max({std::fabs(analytic), std::fabs(numeric), s.floor});
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = p->name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) +
                    " numeric " + std::to_string(numeric);
      }
    }
  }
}

ParameterList join(std::initializer_list<ParameterList> lists) {
  ParameterList out;
  for (const auto& l : lists) out.insert(out.end(), l.begin(), l.end());
  return out;
}

// Weighted sum so every output entry gets a distinct upstream gradient.
Var weighted_sum(Var v, const Tensor& w) { return ops::sum(ops::mul_const(v, w)); }

SimState random_state(Rng& rng) {
  CharacterSpec spec;
  RootPose r;
  r.x = rng.uniform(-1, 1);
  r.y = rng.uniform(0.9, 1.3);
  r.theta = rng.uniform(-0.5, 0.5);
  r.vx = rng.uniform(-1, 1);
  r.vy = rng.uniform(-1, 1);
  r.omega = rng.uniform(-1, 1);
  std::array<double, kJoints> q, qd;
  for (int j = 0; j < kJoints; ++j) {
    q[j] = rng.uniform(-0.8, 0.8);
    qd[j] = rng.uniform(-2, 2);
  }
  return forward_kinematics(spec, r, q, qd);
}

Tensor random_states(int n, Rng& rng) {
  std::vector<SimState> v;
  for (int i = 0; i < n; ++i) v.push_back(random_state(rng));
  return states_to_tensor(v);
}

// Random but non-trivial normalizer statistics.
void randomize_normalizer(Normalizer& n, Rng& rng) {
  Tensor m(1, n.dim()), s(1, n.dim());
  for (int k = 0; k < n.dim(); ++k) {
    m(0, k) = rng.normal() * 0.2;
    s(0, k) = rng.uniform(0.5, 2.0);
  }
  n.set(m, s);
}

// Moves every weight off its initialization; the shrunken output layers
// otherwise leave gradients small enough to drown in round-off.
void jitter(const ParameterList& params, Rng& rng, double scale = 0.1) {
  for (Parameter* p : params)
    for (Real& v : p->value.data) v += rng.normal() * scale;
}

void case_dense(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  const bool ln = rng.bernoulli(0.5);
  DenseNet net("dense", DenseConfig{6, 3, {8, 7}, 4, true, ln}, rng);
  jitter(net.parameters(), rng);
  Parameter x = input("x", random_tensor(3, 6, rng));
  Parameter aux = input("aux", random_tensor(3, 3, rng));
  const Tensor w = random_tensor(3, 4, rng);
  Builder build = [&](Tape& t) {
    return weighted_sum(ops::tanh(net.forward(t, t.param(x), t.param(aux))), w);
  };
  compare(join({net.parameters(), {&x, &aux}}), build, pick, s, out);
}

void case_moe(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  MoENet net("moe", MoEConfig{5, 3, {8, 8}, 4, 3, {6}, true}, rng);
  jitter(net.parameters(), rng);
  Parameter st = input("state", random_tensor(3, 5, rng));
  Parameter z = input("z", random_tensor(3, 3, rng));
  const Tensor w = random_tensor(3, 4, rng);
  Builder build = [&](Tape& t) {
    Var y = net.forward(t, t.param(st), t.param(z));
    return ops::add(weighted_sum(y, w), ops::sum(ops::square(y)));
  };
  compare(join({net.parameters(), {&st, &z}}), build, pick, s, out);
}

CvaeConfig tiny_cvae() {
  CvaeConfig c;
  c.latent = 3;
  c.prior_hidden = {8, 8};
  c.posterior_hidden = {8};
  c.policy_hidden = {8, 8};
  c.gate_hidden = {6};
  c.experts = 2;
  return c;
}

void case_posterior(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  ControlVae vae(tiny_cvae(), rng);
  randomize_normalizer(vae.normalizer(), rng);
  jitter(join({vae.prior_parameters(), vae.posterior_parameters(), vae.policy_parameters()}), rng);
  Parameter ls = input("local", random_tensor(2, kLocalDim, rng, 0.5));
  Parameter lr = input("ref", random_tensor(2, kLocalDim, rng, 0.5));
  const Tensor nz = random_tensor(2, 3, rng), na = random_tensor(2, kActionDim, rng);
  const Tensor w = random_tensor(2, kActionDim, rng);
  Builder build = [&](Tape& t) {
    Var ns = vae.normalize(t, t.param(ls));
    Var nr = vae.normalize(t, t.param(lr));
    ControlVae::Latent l = vae.posterior_sample(t, ns, nr, nz);
    Var a = vae.policy_sample(t, ns, l.z, na);
    return ops::add(weighted_sum(a, w), ops::mean(kl_term(l.mu_q, vae.sigma_latent())));
  };
  compare(join({vae.prior_parameters(), vae.posterior_parameters(), vae.policy_parameters(),
                {&ls, &lr}}),
          build, pick, s, out);
}

WorldModel tiny_world_model(Rng& rng) {
  WorldModelConfig c;
  c.hidden = {8, 8};
  WorldModel wm(c, 0.05, rng);
  randomize_normalizer(wm.input_normalizer(), rng);
  for (Real& v : wm.delta_scale().value.data) v = rng.uniform(0.2, 1.0);
  return wm;
}

void case_wm_bptt(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  WorldModel wm = tiny_world_model(rng);
  const int T = 8, B = 2;
  Parameter start = input("start", random_states(B, rng));
  std::vector<Parameter> acts;
  for (int t = 0; t < T; ++t) acts.push_back(input("a" + std::to_string(t), random_tensor(B, kActionDim, rng, 0.5)));
  std::vector<Tensor> targets;
  for (int t = 0; t < T; ++t) targets.push_back(random_states(B, rng));
  Builder build = [&](Tape& t) {
    Var st = t.param(start);
    std::vector<Var> preds;
    for (int k = 0; k < T; ++k) {
      st = wm.predict(t, st, t.param(acts[k]));
      preds.push_back(st);
    }
    return wm_loss(t, preds, targets, StateErrorWeights{});
  };
  ParameterList params = wm.net().parameters();
  params.push_back(&start);
  for (Parameter& a : acts) params.push_back(&a);
  compare(params, build, pick, s, out);
}

void case_elbo(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  CvaeConfig c = tiny_cvae();
  c.horizon = 8;
  ControlVae vae(c, rng);
  randomize_normalizer(vae.normalizer(), rng);
  jitter(join({vae.prior_parameters(), vae.posterior_parameters(), vae.policy_parameters()}), rng);
  WorldModel wm = tiny_world_model(rng);
  const int B = 2;
  VaeBatch batch;
  batch.start = random_states(B, rng);
  std::vector<SimState> refs;
  for (int t = 0; t < c.horizon; ++t) {
    std::vector<LocalState> l;
    for (int i = 0; i < B; ++i) l.push_back(to_local(random_state(rng)));
    batch.ref.push_back(locals_to_tensor(l));
    Tensor m(B, 1, 1.0);
    if (t >= 6) m(1, 0) = 0;
    batch.mask.push_back(m);
  }
  const std::uint64_t noise_seed = rng.next_u64();
  Builder build = [&](Tape& t) {
    Rng noise(noise_seed);
    ElboLosses l = elbo_losses(t, vae, wm, batch, noise);
    return ops::add(ops::add(l.rec, ops::scale(l.kl, 0.05)), l.act);
  };
  compare(join({vae.prior_parameters(), vae.posterior_parameters(), vae.policy_parameters()}),
          build, pick, s, out);
}

void case_state_ops(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  const int B = 3;
  Parameter st = input("states", random_states(B, rng));
  Parameter d = input("deltas", random_tensor(B, 3 * kBodies, rng));
  Parameter y = input("y", random_tensor(B, 2, rng));
  Parameter x = input("x", random_tensor(B, 2, rng));
  const Tensor target = random_states(B, rng);
  const Tensor w1 = random_tensor(B, kLocalDim, rng), w2 = random_tensor(B, kStateDim, rng);
  const Tensor ang = random_tensor(1, 2, rng, 2.0);
  Builder build = [&](Tape& t) {
    Var S = t.param(st);
    Var l = weighted_sum(ops::state_to_local(S), w1);
    Var n = weighted_sum(ops::integrate_deltas(S, t.param(d), 0.05), w2);
    Var e = ops::sum(ops::state_error(S, target, StateErrorWeights{1, 0.7, 0.2, 0.3}));
    Var a = ops::atan2(t.param(y), t.param(x));
    Var g = ops::add(ops::sum(ops::angle_distance(a, ang)), ops::sum(ops::shortfall(t.param(y), 0.3)));
    return ops::add(ops::add(l, n), ops::add(e, g));
  };
  compare({&st, &d, &y, &x}, build, pick, s, out);
}

void case_task_policy(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  ControlVae vae(tiny_cvae(), rng);
  randomize_normalizer(vae.normalizer(), rng);
  WorldModel wm = tiny_world_model(rng);
  TaskPolicyNet pol("task", goal_dim(TaskTag::Heading), {8}, 3, vae.sigma_latent(), rng);
  jitter(pol.parameters(), rng);
  const int T = 4, B = 2;
  const Tensor start = random_states(B, rng);
  std::vector<std::vector<TaskGoal>> goals(T);
  for (int t = 0; t < T; ++t)
    for (int i = 0; i < B; ++i) {
      TaskGoal g;
      g.heading = rng.bernoulli(0.5) ? 0.0 : kPi;
      g.speed = rng.uniform(0, 2);
      goals[t].push_back(g);
    }
  const std::uint64_t noise_seed = rng.next_u64();
  Builder build = [&](Tape& t) {
    t.freeze(join({vae.parameters(), wm.parameters()}));
    Rng noise(noise_seed);
    Var st = t.constant(start);
    Var total;
    for (int k = 0; k < T; ++k) {
      Var ns = vae.normalize(t, ops::state_to_local(st));
      TaskPolicyNet::Sample smp = pol.sample(t, vae, ns, t.constant(goals_to_tensor(goals[k])),
                                             normal_tensor(B, 3, noise));
      Var a = vae.policy_sample(t, ns, smp.z, normal_tensor(B, kActionDim, noise));
      Var next = wm.predict(t, st, a);
      Var l = ops::add(ops::task_loss(TaskTag::Heading, st, next, goals[k]),
                       ops::scale(latent_regularizer(smp.mu_g), 20));
      total = k == 0 ? ops::mean(l) : ops::add(total, ops::mean(l));
      st = next;
    }
    return total;
  };
  compare(pol.parameters(), build, pick, s, out);
}

void case_lsgan(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  Discriminator d(6, 2, {8, 7}, rng);
  jitter(d.parameters(), rng);
  Parameter real = input("real", random_tensor(3, 6, rng));
  Parameter fake = input("fake", random_tensor(3, 6, rng));
  const Tensor ro = one_hot(std::vector<int>{0, 1, 1}, 2), fo = one_hot(std::vector<int>{1, 0, 1}, 2);
  Builder build = [&](Tape& t) {
    return lsgan_discriminator_loss(t, d, t.param(real), ro, t.param(fake), fo, 20);
  };
  compare(join({d.parameters(), {&real, &fake}}), build, pick, s, out);
}

void case_classifier(Rng& rng, Rng& pick, const Settings& s, CaseResult& out) {
  Classifier c(6, 3, {8, 8}, rng);
  Parameter x = input("pairs", random_tensor(4, 6, rng));
  const std::vector<int> labels{0, 2, 1, 2};
  Builder build = [&](Tape& t) {
    return ops::mean(ops::cross_entropy(c.logits(t, t.param(x)), labels));
  };
  compare(join({c.parameters(), {&x}}), build, pick, s, out);
}

const std::map<std::string, std::function<void(Rng&, Rng&, const Settings&, CaseResult&)>>&
registry() {
  static const std::map<std::string, std::function<void(Rng&, Rng&, const Settings&, CaseResult&)>> r{
      {"dense", case_dense},         {"moe", case_moe},   {"posterior_composite", case_posterior},
      {"wm_bptt_h8", case_wm_bptt}, {"elbo_h8", case_elbo}, {"state_ops", case_state_ops},
      {"task_policy_h4", case_task_policy}, {"lsgan_gp", case_lsgan}, {"classifier", case_classifier}};
  return r;
}

}  // namespace

std::vector<std::string> case_names() {
  std::vector<std::string> n;
  for (const auto& [k, v] : registry()) n.push_back(k);
  return n;
}

CaseResult run_case(const std::string& name, int seeds, std::uint64_t base_seed,
                    const Settings& settings) {
  auto it = registry().find(name);
  if (it == registry().end()) throw std::invalid_argument("unknown gradient check '" + name + "'");
  CaseResult out;
  out.name = name;
  for (int k = 0; k < seeds; ++k) {
    Rng rng = Rng::stream(base_seed + static_cast<std::uint64_t>(k), name);
    Rng pick = Rng::stream(base_seed + static_cast<std::uint64_t>(k), name + ".pick");
    it->second(rng, pick, settings, out);
    ++out.seeds;
  }
  return out;
}

}  // namespace gradcheck
