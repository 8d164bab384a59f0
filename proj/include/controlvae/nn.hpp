#pragma once

#include <optional>
#include <string>
#include <vector>

#include "controlvae/tape.hpp"

CONTROLVAE_NAMESPACE_BEGIN

enum class Activation { Elu, Identity };

struct DenseConfig {
  int in = 0;
  int aux = 0;                 // width of the vector appended to later layers
  std::vector<int> hidden;
  int out = 0;
  bool concat_aux = false;     // append aux to the input of every layer after the first
  bool layer_norm = false;     // normalize each hidden-layer input (learned affine)
};

// Fully connected network with ELU hidden layers and an identity output.
// Layer 0 reads the main input; each later layer reads [h, aux] when
// concat_aux is set, optionally layer-normalized.
class DenseNet {
 public:
  struct Layer {
    Parameter weight;  // [out, in]
    Parameter bias;    // [1, out]
    Parameter gain;    // [1, in], only when normalized
    Parameter shift;   // [1, in]
    bool normalized = false;
    Activation act = Activation::Elu;
  };

  static constexpr Real kLayerNormEps = Real(1e-5);

  DenseNet() = default;
  DenseNet(std::string name, DenseConfig cfg, Rng& rng);

  Var forward(Tape& tape, Var x, std::optional<Var> aux = std::nullopt);
  // Single forward pass on its own tape.
  Tensor eval(const Tensor& x, const Tensor* aux = nullptr);

  ParameterList parameters();
  const DenseConfig& config() const { return cfg_; }
  const std::string& name() const { return name_; }
  int layer_count() const { return static_cast<int>(layers_.size()); }
  Layer& layer(int i) { return layers_.at(i); }
  const Layer& layer(int i) const { return layers_.at(i); }
  // Declared input width of layer i (including appended aux).
  int layer_input_width(int i) const;

  // Sets every weight and bias to zero (used for residual heads and tests).
  void zero_output_layer();
  // Multiplies the output layer's weights by s (small initial outputs).
  void scale_output_layer(Real s);
  void zero_all();

 private:
  std::string name_;
  DenseConfig cfg_;
  std::vector<Layer> layers_;
};

struct MoEConfig {
  int state_dim = 0;
  int latent_dim = 0;
  std::vector<int> hidden;      // per expert
  int out = 0;
  int experts = 4;
  std::vector<int> gate_hidden;
  bool layer_norm = true;
};

// Mixture of experts whose per-sample network is the gate-weighted blend of
// the expert parameters. The gate reads the state; experts read [state,
// latent] with the latent appended to every later layer.
class MoENet {
 public:
  MoENet() = default;
  MoENet(std::string name, MoEConfig cfg, Rng& rng);

  // Gate weights (softmax) for a batch of states, [B, experts].
  Var gate(Tape& tape, Var state);
  // forced_gate, if given, replaces the learned gate ([B, experts] or [1, experts]).
  Var forward(Tape& tape, Var state, Var latent, const Tensor* forced_gate = nullptr);
  Tensor eval(const Tensor& state, const Tensor& latent,
              const Tensor* forced_gate = nullptr);

  ParameterList parameters();
  const MoEConfig& config() const { return cfg_; }
  int expert_count() const { return static_cast<int>(experts_.size()); }
  DenseNet& expert(int k) { return experts_.at(k); }
  DenseNet& gate_net() { return gate_; }

 private:
  std::string name_;
  MoEConfig cfg_;
  std::vector<DenseNet> experts_;
  DenseNet gate_;
};

// Fixed per-feature affine normalizer y = (x - mean) / std. Statistics are
// stored as non-trainable parameters so they travel with checkpoints.
class Normalizer {
 public:
  Normalizer() = default;
  Normalizer(std::string name, int dim);

  // Fits mean/std over the rows of `data`; std below `floor` is raised to it.
  void fit(const Tensor& data, Real floor);
  void set(const Tensor& mean, const Tensor& std);
  Var apply(Tape& tape, Var x) const;
  Tensor apply(const Tensor& x) const;

  int dim() const { return mean_.value.cols; }
  ParameterList parameters() { return {&mean_, &std_}; }
  const Tensor& mean() const { return mean_.value; }
  const Tensor& stddev() const { return std_.value; }

 private:
  Tensor inv_std() const;

  Parameter mean_;
  Parameter std_;
};

// mean + sigma * noise, differentiable in mean.
Var reparam_sample(Tape& tape, Var mean, Real sigma, const Tensor& noise);
Tensor reparam_sample(const Tensor& mean, Real sigma, const Tensor& noise);

// Standard normal draws of the given shape.
Tensor normal_tensor(int rows, int cols, Rng& rng);

CONTROLVAE_NAMESPACE_END
