#include "controlvae/nn.hpp"

#include <algorithm>
#include <cmath>

CONTROLVAE_NAMESPACE_BEGIN

namespace {

Tensor xavier(int out, int in, Rng& rng) {
  Tensor w(out, in);
  const double a = std::sqrt(6.0 / (in + out));
  for (Real& x : w.data) x = static_cast<Real>(rng.uniform(-a, a));
  return w;
}

Var activate(Var x, Activation act) {
  return act == Activation::Elu ? ops::elu(x) : x;
}

}  // namespace

DenseNet::DenseNet(std::string name, DenseConfig cfg, Rng& rng)
    : name_(std::move(name)), cfg_(std::move(cfg)) {
  if (cfg_.in <= 0 || cfg_.out <= 0) {
    throw ConfigError(name_ + ": input and output widths must be positive");
  }
  if (cfg_.concat_aux && cfg_.aux <= 0) {
    throw ConfigError(name_ + ": concat_aux requires a positive aux width");
  }
  std::vector<int> widths = cfg_.hidden;
  widths.push_back(cfg_.out);
  int prev = cfg_.in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const int in = i == 0 ? prev : prev + (cfg_.concat_aux ? cfg_.aux : 0);
    const int out = widths[i];
    if (out <= 0) throw ConfigError(name_ + ": layer " + std::to_string(i) + " has no units");
    const std::string p = name_ + ".l" + std::to_string(i);
    Layer L;
    L.weight = Parameter(p + ".w", xavier(out, in, rng));
    L.bias = Parameter(p + ".b", Tensor(1, out));
    L.normalized = cfg_.layer_norm && i > 0;
    if (L.normalized) {
      L.gain = Parameter(p + ".ln_gain", Tensor(1, in, Real(1)));
      L.shift = Parameter(p + ".ln_shift", Tensor(1, in));
    }
    L.act = i + 1 == widths.size() ? Activation::Identity : Activation::Elu;
    layers_.push_back(std::move(L));
    prev = out;
  }
}

int DenseNet::layer_input_width(int i) const { return layers_.at(i).weight.value.cols; }

Var DenseNet::forward(Tape& tape, Var x, std::optional<Var> aux) {
  if (aux.has_value() != cfg_.concat_aux) {
    throw ConfigError(name_ + ": aux input must be given iff concat_aux is set");
  }
  Var h = x;
  for (int i = 0; i < layer_count(); ++i) {
    Layer& L = layers_[i];
    Var in = (i > 0 && aux) ? ops::concat_cols(h, *aux) : h;
    if (in.cols() != L.weight.value.cols) {
      throw ConfigError(name_ + ": layer " + std::to_string(i) + " expects input width " +
                        std::to_string(L.weight.value.cols) + ", got " +
                        std::to_string(in.cols()));
    }
    if (L.normalized) {
      in = ops::layer_norm(in, kLayerNormEps);
      in = ops::add(ops::mul(in, tape.param(L.gain)), tape.param(L.shift));
    }
    h = activate(ops::linear(in, tape.param(L.weight), tape.param(L.bias)), L.act);
  }
  return h;
}

Tensor DenseNet::eval(const Tensor& x, const Tensor* aux) {
  Tape tape;
  std::optional<Var> a;
  if (aux) a = tape.constant(*aux);
  return forward(tape, tape.constant(x), a).value();
}

ParameterList DenseNet::parameters() {
  ParameterList out;
  for (Layer& L : layers_) {
    out.push_back(&L.weight);
    out.push_back(&L.bias);
    if (L.normalized) {
      out.push_back(&L.gain);
      out.push_back(&L.shift);
    }
  }
  return out;
}

void DenseNet::zero_output_layer() {
  layers_.back().weight.value.zero();
  layers_.back().bias.value.zero();
}

void DenseNet::scale_output_layer(Real s) {
  for (Real& v : layers_.back().weight.value.data) v *= s;
}

void DenseNet::zero_all() {
  for (Layer& L : layers_) {
    L.weight.value.zero();
    L.bias.value.zero();
  }
}

MoENet::MoENet(std::string name, MoEConfig cfg, Rng& rng)
    : name_(std::move(name)), cfg_(std::move(cfg)) {
  if (cfg_.experts < 1) throw ConfigError(name_ + ": need at least one expert");
  DenseConfig ec;
  ec.in = cfg_.state_dim + cfg_.latent_dim;
  ec.aux = cfg_.latent_dim;
  ec.hidden = cfg_.hidden;
  ec.out = cfg_.out;
  ec.concat_aux = true;
  ec.layer_norm = cfg_.layer_norm;
  for (int k = 0; k < cfg_.experts; ++k) {
    experts_.emplace_back(name_ + ".expert" + std::to_string(k), ec, rng);
  }
  DenseConfig gc;
  gc.in = cfg_.state_dim;
  gc.hidden = cfg_.gate_hidden;
  gc.out = cfg_.experts;
  gate_ = DenseNet(name_ + ".gate", gc, rng);
}

Var MoENet::gate(Tape& tape, Var state) {
  return ops::softmax_rows(gate_.forward(tape, state));
}

Var MoENet::forward(Tape& tape, Var state, Var latent, const Tensor* forced_gate) {
  const int K = expert_count();
  for (int k = 1; k < K; ++k) {
    for (int i = 0; i < experts_[0].layer_count(); ++i) {
      if (!experts_[k].layer(i).weight.value.same_shape(experts_[0].layer(i).weight.value)) {
        throw ConfigError(name_ + ": expert " + std::to_string(k) + " layer " +
                          std::to_string(i) + " shape differs from expert 0");
      }
    }
  }
  Var g;
  if (forced_gate) {
    if (forced_gate->cols != K) throw ConfigError(name_ + ": forced gate width mismatch");
    const int B = state.rows();
    if (forced_gate->rows == B) {
      g = tape.constant(*forced_gate);
    } else if (forced_gate->rows == 1) {
      Tensor rows(B, K);
      for (int r = 0; r < B; ++r)
        std::copy(forced_gate->row_ptr(0), forced_gate->row_ptr(0) + K, rows.row_ptr(r));
      g = tape.constant(std::move(rows));
    } else {
      throw ConfigError(name_ + ": forced gate rows must be 1 or the batch size");
    }
  } else {
    g = gate(tape, state);
  }
  Var h = ops::concat_cols(state, latent);
  std::vector<Var> terms(K);
  for (int i = 0; i < experts_[0].layer_count(); ++i) {
    const DenseNet::Layer& L0 = experts_[0].layer(i);
    Var in = i > 0 ? ops::concat_cols(h, latent) : h;
    if (in.cols() != L0.weight.value.cols) {
      throw ConfigError(name_ + ": layer " + std::to_string(i) + " expects input width " +
                        std::to_string(L0.weight.value.cols) + ", got " +
                        std::to_string(in.cols()));
    }
    if (L0.normalized) {
      in = ops::layer_norm(in, DenseNet::kLayerNormEps);
      for (int k = 0; k < K; ++k) terms[k] = tape.param(experts_[k].layer(i).gain);
      Var gain = ops::blend(g, terms);
      for (int k = 0; k < K; ++k) terms[k] = tape.param(experts_[k].layer(i).shift);
      Var shift = ops::blend(g, terms);
      in = ops::add(ops::mul(in, gain), shift);
    }
    // Blending weights and biases per sample is the same as blending the
    // experts' affine outputs on a shared input.
    for (int k = 0; k < K; ++k) {
      DenseNet::Layer& Lk = experts_[k].layer(i);
      terms[k] = ops::linear(in, tape.param(Lk.weight), tape.param(Lk.bias));
    }
    h = ops::blend(g, terms);
    if (L0.act == Activation::Elu) h = ops::elu(h);
  }
  return h;
}

Tensor MoENet::eval(const Tensor& state, const Tensor& latent, const Tensor* forced_gate) {
  Tape tape;
  return forward(tape, tape.constant(state), tape.constant(latent), forced_gate).value();
}

ParameterList MoENet::parameters() {
  ParameterList out;
  for (DenseNet& e : experts_) {
    ParameterList p = e.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  ParameterList p = gate_.parameters();
  out.insert(out.end(), p.begin(), p.end());
  return out;
}

Normalizer::Normalizer(std::string name, int dim)
    : mean_(name + ".mean", Tensor(1, dim), false),
      std_(name + ".std", Tensor(1, dim, Real(1)), false) {}

void Normalizer::fit(const Tensor& data, Real floor) {
  if (data.cols != dim()) throw ConfigError(mean_.name + ": fit width mismatch");
  if (data.rows == 0) throw DataError(mean_.name + ": cannot fit on empty data");
  Tensor m(1, dim()), s(1, dim());
  for (int c = 0; c < dim(); ++c) {
    double mu = 0;
    for (int r = 0; r < data.rows; ++r) mu += data(r, c);
    mu /= data.rows;
    double var = 0;
    for (int r = 0; r < data.rows; ++r) var += (data(r, c) - mu) * (data(r, c) - mu);
    var /= data.rows;
    m(0, c) = static_cast<Real>(mu);
    s(0, c) = std::max(static_cast<Real>(std::sqrt(var)), floor);
  }
  set(m, s);
}

void Normalizer::set(const Tensor& mean, const Tensor& std) {
  if (!mean.same_shape(mean_.value) || !std.same_shape(std_.value)) {
    throw ConfigError(mean_.name + ": statistics shape mismatch");
  }
  for (Real v : std.data) {
    if (!(v > 0)) throw ConfigError(mean_.name + ": std must be positive");
  }
  mean_.value = mean;
  std_.value = std;
}

Tensor Normalizer::inv_std() const {
  Tensor inv = std_.value;
  for (Real& v : inv.data) v = Real(1) / v;
  return inv;
}

Var Normalizer::apply(Tape& tape, Var x) const {
  (void)tape;
  Tensor neg_mean = mean_.value;
  for (Real& v : neg_mean.data) v = -v;
  return ops::mul_const(ops::add_const(x, neg_mean), inv_std());
}

Tensor Normalizer::apply(const Tensor& x) const {
  if (x.cols != dim()) throw ConfigError(mean_.name + ": input width mismatch");
  const Tensor inv = inv_std();
  Tensor y(x.rows, x.cols);
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) y(r, c) = (x(r, c) - mean_.value(0, c)) * inv(0, c);
  return y;
}

Var reparam_sample(Tape& tape, Var mean, Real sigma, const Tensor& noise) {
  (void)tape;
  if (!noise.same_shape(mean.value())) throw ConfigError("reparam_sample: noise shape mismatch");
  if (sigma == Real(0)) return mean;
  Tensor scaled = noise;
  for (Real& v : scaled.data) v *= sigma;
  return ops::add_const(mean, scaled);
}

Tensor reparam_sample(const Tensor& mean, Real sigma, const Tensor& noise) {
  if (!noise.same_shape(mean)) throw ConfigError("reparam_sample: noise shape mismatch");
  Tensor out = mean;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += sigma * noise.data[i];
  return out;
}

Tensor normal_tensor(int rows, int cols, Rng& rng) {
  Tensor t(rows, cols);
  for (Real& v : t.data) v = static_cast<Real>(rng.normal());
  return t;
}

CONTROLVAE_NAMESPACE_END
