#pragma once

#include <vector>

#include "controlvae/tensor.hpp"

CONTROLVAE_NAMESPACE_BEGIN

enum class ClipMode { Elementwise, GlobalNorm };

// Clamps every gradient component into [-limit, limit], or rescales all
// gradients together so their global L2 norm is at most `limit`.
void clip_gradients(const ParameterList& params, ClipMode mode = ClipMode::Elementwise,
                    Real limit = Real(1));
void clip_values(Tensor& t, Real limit);

struct RAdamState {
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

// Rectified Adam. Moments are bound to the parameter list by position.
class RAdam {
 public:
  RAdam() = default;
  RAdam(const ParameterList& params, double lr, double beta1 = 0.9, double beta2 = 0.999);

  // One update from the gradients stored in the parameters. Non-trainable
  // parameters are skipped. Throws NumericError (and leaves everything
  // untouched) when any gradient is non-finite.
  void step(const ParameterList& params);

  void set_lr(double lr);
  double lr() const { return state_.lr; }
  long step_count() const { return state_.step; }
  RAdamState& state() { return state_; }
  const RAdamState& state() const { return state_; }

  // Length of the variance rectification term's support; the adaptive
  // branch is taken when rho_t > 4.
  static double rho(long t, double beta2);

 private:
  RAdamState state_;
};

CONTROLVAE_NAMESPACE_END
