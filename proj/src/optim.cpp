#include "controlvae/optim.hpp"

#include <algorithm>
#include <cmath>

CONTROLVAE_NAMESPACE_BEGIN

void clip_values(Tensor& t, Real limit) {
  for (Real& g : t.data) g = std::clamp(g, -limit, limit);
}

void clip_gradients(const ParameterList& params, ClipMode mode, Real limit) {
  if (mode == ClipMode::Elementwise) {
    for (Parameter* p : params) clip_values(p->grad, limit);
    return;
  }
  double sq = 0;
  for (const Parameter* p : params)
    for (Real g : p->grad.data) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm <= limit || norm == 0) return;
  const Real s = static_cast<Real>(limit / norm);
  for (Parameter* p : params)
    for (Real& g : p->grad.data) g *= s;
}

RAdam::RAdam(const ParameterList& params, double lr, double beta1, double beta2) {
  state_.lr = lr;
  state_.beta1 = beta1;
  state_.beta2 = beta2;
  set_lr(lr);
  for (const Parameter* p : params) {
    state_.m.emplace_back(p->value.rows, p->value.cols);
    state_.v.emplace_back(p->value.rows, p->value.cols);
  }
}

void RAdam::set_lr(double lr) {
  if (!(lr > 0)) throw ConfigError("RAdam: learning rate must be positive");
  state_.lr = lr;
}

double RAdam::rho(long t, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double b2t = std::pow(beta2, static_cast<double>(t));
  return rho_inf - 2.0 * t * b2t / (1.0 - b2t);
}

void RAdam::step(const ParameterList& params) {
  if (params.size() != state_.m.size()) {
    throw ConfigError("RAdam: parameter list length changed");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter* p = params[i];
    if (!p->grad.same_shape(state_.m[i]) || !p->value.same_shape(state_.m[i])) {
      throw ConfigError("RAdam: shape mismatch for parameter '" + p->name + "'");
    }
    if (p->trainable && !p->grad.all_finite()) {
      throw NumericError("RAdam: non-finite gradient in '" + p->name + "'");
    }
  }
  const long t = state_.step + 1;
  const double b1 = state_.beta1, b2 = state_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  const double rho_t = rho(t, b2);
  const bool adaptive = rho_t > 4.0;
  double r = 0;
  if (adaptive) {
    r = std::sqrt((rho_t - 4) * (rho_t - 2) * rho_inf /
                  ((rho_inf - 4) * (rho_inf - 2) * rho_t));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter* p = params[i];
    if (!p->trainable) continue;
    Tensor& m = state_.m[i];
    Tensor& v = state_.v[i];
    for (std::size_t j = 0; j < p->value.data.size(); ++j) {
      const double g = p->grad.data[j];
      const double mj = b1 * m.data[j] + (1 - b1) * g;
      const double vj = b2 * v.data[j] + (1 - b2) * g * g;
      m.data[j] = static_cast<Real>(mj);
      v.data[j] = static_cast<Real>(vj);
      const double mhat = mj / bc1;
      double delta;
      if (adaptive) {
        const double vhat = std::sqrt(vj / bc2);
        delta = state_.lr * r * mhat / (vhat + state_.eps);
      } else {
        delta = state_.lr * mhat;
      }
      p->value.data[j] = static_cast<Real>(p->value.data[j] - delta);
    }
  }
  state_.step = t;
}

CONTROLVAE_NAMESPACE_END
