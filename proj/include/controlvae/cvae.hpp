#pragma once

#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "controlvae/motiondata.hpp"
#include "controlvae/nn.hpp"
#include "controlvae/optim.hpp"
#include "controlvae/worldmodel.hpp"

CONTROLVAE_NAMESPACE_BEGIN

struct CvaeConfig {
  int latent = 16;
  std::vector<int> prior_hidden{64, 64};
  std::vector<int> posterior_hidden{64, 64};
  std::vector<int> policy_hidden{64, 64, 64};
  std::vector<int> gate_hidden{32, 32};
  int experts = 4;
  double sigma_p = 0.3;
  double sigma_pi = 0.05;
  bool standard_prior = false;   // N(0, I) prior, the non-conditional ablation

  double gamma = 0.95;
  double beta_min = 0.01;
  double beta_max = 0.1;
  int beta_period = 500;         // epochs per staircase window
  int beta_windows = 10;         // windows until beta_max
  int horizon = 24;              // T_VAE
  int batch = 32;                // N_VAE
  int updates = 8;
  double w_a1 = 0.01;
  double w_a2 = 0.005;
  bool l2_only = false;          // drop the L1 action term
  double lr_prior = 1e-4;
  double lr_posterior = 1e-4;
  double lr_policy = 1e-4;
  ClipMode clip = ClipMode::Elementwise;
  ReconWeights recon{};

  // collection
  double prior_prob = 0.4;
  double switch_prob = 1.0 / 72.0;
  bool reference_switch = true;
  double reward_temperature = 20;
  TerminationConfig termination{};
  int buffer_capacity = 5000;
  int staging = 512;             // N_B'
  int value_period = 200;        // epochs between value-table refreshes
  double value_alpha = 0.1;

  double sigma_latent() const { return standard_prior ? 1.0 : sigma_p; }
  void validate() const;
  nlohmann::json to_json() const;
  static CvaeConfig from_json(const nlohmann::json& j);
};

// Staircase from beta_min to beta_max, one step per beta_period epochs.
double beta_at(int epoch, const CvaeConfig& cfg);

// ||mu_q||^2 / (2 sigma^2) per row -> [B, 1].
Var kl_term(Var mu_q, Real sigma);
double kl_term(std::span<const double> mu_q, double sigma);

// Prior, residual posterior and MoE policy over normalized local states.
class ControlVae {
 public:
  ControlVae() = default;
  ControlVae(const CvaeConfig& cfg, Rng& rng);

  // Fits the shared state normalizer on every frame of the dataset.
  void fit_normalizer(const Dataset& data);

  Var normalize(Tape& tape, Var local) const { return norm_.apply(tape, local); }

  // All of these take normalized local states.
  Var prior_mean(Tape& tape, Var ns);
  Var posterior_residual(Tape& tape, Var ns, Var nref);
  Var policy_mean(Tape& tape, Var ns, Var z);

  struct Latent {
    Var z, mu_p, mu_q;
  };
  Latent prior_sample(Tape& tape, Var ns, const Tensor& noise);
  Latent posterior_sample(Tape& tape, Var ns, Var nref, const Tensor& noise);
  Var policy_sample(Tape& tape, Var ns, Var z, const Tensor& noise);

  // Single-state helpers for control loops.
  Tensor prior_sample(const LocalState& s, Rng& rng);
  Tensor posterior_sample(const LocalState& s, const LocalState& ref, Rng& rng);
  Action policy_act(const LocalState& s, const Tensor& z, Rng& rng, bool deterministic);

  ParameterList prior_parameters() { return prior_.parameters(); }
  ParameterList posterior_parameters() { return posterior_.parameters(); }
  ParameterList policy_parameters() { return policy_.parameters(); }
  ParameterList normalizer_parameters() { return norm_.parameters(); }
  ParameterList parameters();

  DenseNet& prior() { return prior_; }
  DenseNet& posterior() { return posterior_; }
  MoENet& policy() { return policy_; }
  Normalizer& normalizer() { return norm_; }
  const CvaeConfig& config() const { return cfg_; }
  Real sigma_latent() const { return static_cast<Real>(cfg_.sigma_latent()); }

 private:
  CvaeConfig cfg_;
  Normalizer norm_;
  DenseNet prior_;
  DenseNet posterior_;
  MoENet policy_;
};

// Batch of start states from the rollout buffer with their reference
// windows. ref[t] is the reference for state t + 1; mask[t] is 0 where the
// clip ended before step t + 1.
struct VaeBatch {
  Tensor start;               // [B, 30]
  std::vector<Tensor> ref;    // T x [B, 42], local
  std::vector<Tensor> mask;   // T x [B, 1]
};

VaeBatch sample_vae_batch(const RolloutBuffer& buffer, const Dataset& data, int horizon,
                          int batch, Rng& rng);

struct ElboLosses {
  Var rec, kl, act;
};

// Unrolls posterior, policy and the frozen world model over the batch.
// Each loss is a discounted sum over steps, averaged over the batch.
ElboLosses elbo_losses(Tape& tape, ControlVae& vae, WorldModel& wm, const VaeBatch& batch,
                       Rng& rng);

struct VaeOptimizers {
  RAdam prior, posterior, policy;
};
VaeOptimizers make_vae_optimizers(ControlVae& vae);

struct VaeStepResult {
  double rec = 0, kl = 0, act = 0, total = 0;
};
VaeStepResult vae_step(ControlVae& vae, VaeOptimizers& opt, WorldModel& wm,
                       const VaeBatch& batch, double beta, Rng& rng);

struct CollectStats {
  int trajectories = 0;
  int transitions = 0;
  int diverged = 0;
  int prior_draws = 0;
  int posterior_draws = 0;
  int switches = 0;
  double mean_reward = 0;   // per step, over every collected step
};

// Runs the true simulator under posterior (or prior) latents until the
// staging area is full, then merges it into the buffer. Trajectories are
// generated in parallel on `workers` threads from per-trajectory seeds, so
// the result does not depend on the worker count.
CollectStats collect_trajectories(ControlVae& vae, const Dataset& data, const ValueTable& values,
                                  RolloutBuffer& buffer, const CharacterSpec& spec,
                                  const CvaeConfig& cfg, Rng& rng, int workers = 1);

// One trajectory from a given start; exposed for tests and evaluation.
Trajectory collect_one(ControlVae& vae, const Dataset& data, int clip, int frame,
                       const CharacterSpec& spec, const CvaeConfig& cfg, Rng& rng,
                       CollectStats* stats = nullptr);

// Refreshes the value table from every stored trajectory.
void refresh_values(ValueTable& values, const RolloutBuffer& buffer, double gamma);

struct EpochMetrics {
  int epoch = 0;
  double beta = 0;
  double wm_loss = 0;
  double rec = 0, kl = 0, act = 0, total = 0;
  double reward = 0;
  int trajectories = 0;
  int transitions = 0;
  int diverged = 0;
  int buffer_states = 0;
  bool values_refreshed = false;

  nlohmann::json to_json() const;
};

// Everything a training run carries from epoch to epoch.
struct TrainState {
  CharacterSpec spec;
  CvaeConfig cfg;
  WorldModelConfig wm_cfg;
  ControlVae vae;
  WorldModel wm;
  VaeOptimizers vae_opt;
  RAdam wm_opt;
  ValueTable values;
  RolloutBuffer buffer;
  Rng collect_rng, wm_rng, vae_rng;
  int epoch = 0;   // epochs completed
  int workers = 1;

  TrainState() = default;
  TrainState(const CharacterSpec& spec, const CvaeConfig& cfg, const WorldModelConfig& wm_cfg,
             const Dataset& data, std::uint64_t seed);

  // Saves / restores the complete state under `dir`.
  void save(const std::string& dir);
  void load(const std::string& dir);
};

// Collection, world-model updates, VAE updates and (periodically) the value
// refresh. On any exception the state is rolled back to the start of the
// epoch before rethrowing.
EpochMetrics train_epoch(TrainState& state, const Dataset& data);

// Mean per-step reward and root position error of posterior tracking of a
// clip in the true simulator.
struct TrackingResult {
  std::vector<SimState> states;
  std::vector<double> root_error;   // per frame, meters
  std::vector<double> reward;
  int steps = 0;
  bool fell = false;
};
TrackingResult track_clip(ControlVae& vae, const MotionClip& clip, const CharacterSpec& spec,
                          const CvaeConfig& cfg, int steps, Rng& rng, bool deterministic = true);

// Prior-driven free run; returns the states.
std::vector<SimState> random_walk(ControlVae& vae, const SimState& start,
                                  const CharacterSpec& spec, int steps, Rng& rng,
                                  bool* fell = nullptr);

CONTROLVAE_NAMESPACE_END
