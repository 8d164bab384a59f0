#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <tuple>
#include <filesystem>

#include "controlvae/checkpoint.hpp"
#include "controlvae/kernels.hpp"
#include "controlvae/nn.hpp"
#include "controlvae/optim.hpp"

using namespace controlvae;

namespace {

Tensor random_tensor(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (Real& x : t.data) x = static_cast<Real>(rng.uniform(-scale, scale));
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data.data(), b.data.data(), a.size() * sizeof(Real)) == 0;
}

}  // namespace

TEST_CASE("dense_forward: zero weights give the last bias") {
  Rng rng(1);
  DenseConfig cfg{.in = 3, .hidden = {5, 4}, .out = 2};
  DenseNet net("n", cfg, rng);
  net.zero_all();
  net.layer(2).bias.value = Tensor::from_rows(1, 2, {0.25f, -1.5f});
  Tensor y = net.eval(Tensor::from_rows(1, 3, {7, -2, 3}));
  CHECK(y(0, 0) == doctest::Approx(0.25));
  CHECK(y(0, 1) == doctest::Approx(-1.5));
}

TEST_CASE("dense_forward: identity single layer") {
  Rng rng(1);
  DenseNet net("n", {.in = 2, .out = 2}, rng);
  net.layer(0).weight.value = Tensor::from_rows(2, 2, {1, 0, 0, 1});
  net.layer(0).bias.value.zero();
  Tensor y = net.eval(Tensor::from_rows(1, 2, {1, 2}));
  CHECK(y(0, 0) == 1);
  CHECK(y(0, 1) == 2);
}

TEST_CASE("dense_forward: ELU hidden unit") {
  // one ELU layer W=[[1]] b=[0] followed by an identity readout
  Rng rng(1);
  DenseNet net("n", {.in = 1, .hidden = {1}, .out = 1}, rng);
  net.layer(0).weight.value = Tensor::from_rows(1, 1, {1});
  net.layer(0).bias.value.zero();
  net.layer(1).weight.value = Tensor::from_rows(1, 1, {1});
  net.layer(1).bias.value.zero();
  Tensor y = net.eval(Tensor::from_rows(1, 1, {-1}));
  CHECK(y(0, 0) == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-6));
  CHECK(y(0, 0) == doctest::Approx(-0.632121).epsilon(1e-5));
}

TEST_CASE("dense_forward: shape errors name the layer") {
  Rng rng(1);
  DenseNet net("n", {.in = 3, .aux = 2, .hidden = {4}, .out = 1, .concat_aux = true}, rng);
  Tape tape;
  Var x = tape.constant(Tensor(1, 4));
  Var a = tape.constant(Tensor(1, 2));
  try {
    net.forward(tape, x, a);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }
  Tape t2;
  CHECK_THROWS_AS(net.forward(t2, t2.constant(Tensor(1, 3))), ConfigError);
  Tape t3;
  CHECK_THROWS_AS(net.forward(t3, t3.constant(Tensor(1, 3)), t3.constant(Tensor(1, 3))),
                  ConfigError);
}

TEST_CASE("dense_forward: concatenation and layer norm widths") {
  Rng rng(2);
  DenseNet net("n", {.in = 6, .aux = 2, .hidden = {8, 8}, .out = 3, .concat_aux = true,
                     .layer_norm = true},
               rng);
  CHECK(net.layer_input_width(0) == 6);
  CHECK(net.layer_input_width(1) == 10);
  CHECK(net.layer_input_width(2) == 10);
  CHECK_FALSE(net.layer(0).normalized);
  CHECK(net.layer(1).normalized);
  CHECK(net.layer(1).gain.value(0, 0) == 1);
  CHECK(net.layer(1).shift.value(0, 0) == 0);
  Tensor x = random_tensor(4, 6, rng), a = random_tensor(4, 2, rng);
  Tensor y1 = net.eval(x, &a), y2 = net.eval(x, &a);
  CHECK(y1.rows == 4);
  CHECK(y1.cols == 3);
  CHECK(bitwise_equal(y1, y2));
}

TEST_CASE("initialization follows the uniform fan-in/fan-out bound") {
  Rng rng(3);
  DenseNet net("n", {.in = 20, .hidden = {30}, .out = 10}, rng);
  const double a0 = std::sqrt(6.0 / 50.0), a1 = std::sqrt(6.0 / 40.0);
  double mx0 = 0, mx1 = 0;
  for (Real w : net.layer(0).weight.value.data) mx0 = std::max(mx0, std::fabs(double(w)));
  for (Real w : net.layer(1).weight.value.data) mx1 = std::max(mx1, std::fabs(double(w)));
  CHECK(mx0 <= a0);
  CHECK(mx0 > 0.8 * a0);
  CHECK(mx1 <= a1);
  for (Real b : net.layer(0).bias.value.data) CHECK(b == 0);
}

namespace {

MoENet make_moe(Rng& rng, int experts = 3) {
  MoEConfig cfg;
  cfg.state_dim = 5;
  cfg.latent_dim = 3;
  cfg.hidden = {6, 6};
  cfg.out = 2;
  cfg.experts = experts;
  cfg.gate_hidden = {4};
  cfg.layer_norm = true;
  return MoENet("moe", cfg, rng);
}

// Perturbs the layer-norm affine terms so blending them is exercised.
void jitter_affine(MoENet& moe, Rng& rng) {
  for (int k = 0; k < moe.expert_count(); ++k) {
    for (int i = 1; i < moe.expert(k).layer_count(); ++i) {
      for (Real& g : moe.expert(k).layer(i).gain.value.data) g += Real(rng.uniform(-0.3, 0.3));
      for (Real& s : moe.expert(k).layer(i).shift.value.data) s = Real(rng.uniform(-0.3, 0.3));
    }
  }
}

Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows, a.cols + b.cols);
  for (int r = 0; r < a.rows; ++r) {
    for (int c = 0; c < a.cols; ++c) out(r, c) = a(r, c);
    for (int c = 0; c < b.cols; ++c) out(r, a.cols + c) = b(r, c);
  }
  return out;
}

}  // namespace

TEST_CASE("moe_forward: identical experts ignore the gate") {
  Rng rng(4);
  MoENet moe = make_moe(rng);
  jitter_affine(moe, rng);
  for (int k = 1; k < moe.expert_count(); ++k) {
    auto src = moe.expert(0).parameters(), dst = moe.expert(k).parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  }
  Tensor s = random_tensor(3, 5, rng), z = random_tensor(3, 3, rng);
  Tensor y = moe.eval(s, z);
  Tensor single = moe.expert(1).eval(concat(s, z), &z);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.data[i] == doctest::Approx(single.data[i]).epsilon(1e-5));
}

TEST_CASE("moe_forward: one-hot gate selects an expert") {
  Rng rng(5);
  MoENet moe = make_moe(rng);
  jitter_affine(moe, rng);
  Tensor s = random_tensor(2, 5, rng), z = random_tensor(2, 3, rng);
  for (int k = 0; k < 3; ++k) {
    Tensor gate(1, 3);
    gate(0, k) = 1;
    Tensor y = moe.eval(s, z, &gate);
    Tensor e = moe.expert(k).eval(concat(s, z), &z);
    for (std::size_t i = 0; i < y.size(); ++i)
      CHECK(y.data[i] == doctest::Approx(e.data[i]).epsilon(1e-5));
  }
}

TEST_CASE("moe_forward: equal gate equals averaged parameters") {
  Rng rng(6);
  MoENet moe = make_moe(rng, 2);
  jitter_affine(moe, rng);
  // Oracle: a plain network whose every parameter is the mean of the experts'.
  DenseNet avg = moe.expert(0);
  auto pa = avg.parameters(), p0 = moe.expert(0).parameters(), p1 = moe.expert(1).parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i]->value.size(); ++j)
      pa[i]->value.data[j] = Real(0.5) * (p0[i]->value.data[j] + p1[i]->value.data[j]);
  Tensor s = random_tensor(4, 5, rng), z = random_tensor(4, 3, rng);
  Tensor gate = Tensor::from_rows(1, 2, {0.5f, 0.5f});
  Tensor y = moe.eval(s, z, &gate);
  Tensor e = avg.eval(concat(s, z), &z);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.data[i] == doctest::Approx(e.data[i]).epsilon(1e-5));
}

TEST_CASE("moe gate is a convex combination and evaluation is deterministic") {
  Rng rng(7);
  MoENet moe = make_moe(rng, 4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor s = random_tensor(8, 5, rng, 5.0), z = random_tensor(8, 3, rng);
    Tape tape;
    Tensor g = moe.gate(tape, tape.constant(s)).value();
    for (int r = 0; r < g.rows; ++r) {
      double sum = 0;
      for (int c = 0; c < g.cols; ++c) {
        CHECK(g(r, c) >= 0);
        sum += g(r, c);
      }
      CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
    CHECK(bitwise_equal(moe.eval(s, z), moe.eval(s, z)));
  }
}

TEST_CASE("moe rejects mismatched experts") {
  Rng rng(8);
  MoENet moe = make_moe(rng, 2);
  moe.expert(1).layer(1).weight.value = Tensor(3, 3);
  CHECK_THROWS_AS(moe.eval(Tensor(1, 5), Tensor(1, 3)), ConfigError);
}

TEST_CASE("backward: sum of parameters has unit gradients") {
  Parameter p("p", Tensor::from_rows(2, 3, {1, 2, 3, 4, 5, 6}));
  Tape tape;
  tape.backward(ops::sum(tape.param(p)));
  for (Real g : p.grad.data) CHECK(g == 1);
}

TEST_CASE("backward: squared norm of Wx") {
  Rng rng(9);
  Parameter w("w", random_tensor(3, 4, rng));
  Parameter b("b", Tensor(1, 3), false);
  Tensor x = random_tensor(1, 4, rng);
  Tape tape;
  Var y = ops::linear(tape.constant(x), tape.param(w), tape.param(b));
  tape.backward(ops::sum(ops::square(y)));
  // oracle: d/dW ||Wx||^2 = 2 (Wx) x^T
  for (int i = 0; i < 3; ++i) {
    double wx = 0;
    for (int j = 0; j < 4; ++j) wx += double(w.value(i, j)) * x(0, j);
    for (int j = 0; j < 4; ++j)
      CHECK(w.grad(i, j) == doctest::Approx(2 * wx * x(0, j)).epsilon(1e-5));
  }
}

TEST_CASE("backward: detached parameter keeps a zero gradient") {
  Parameter a("a", Tensor(1, 2, 1));
  Parameter b("b", Tensor(1, 2, 1));
  Tape tape;
  tape.param(b);
  tape.backward(ops::sum(ops::square(tape.param(a))));
  for (Real g : b.grad.data) CHECK(g == 0);
  for (Real g : a.grad.data) CHECK(g == 2);
}

TEST_CASE("backward: frozen parameters pass gradients but do not accumulate") {
  Parameter w("w", Tensor::from_rows(1, 1, {3}));
  Parameter b("b", Tensor(1, 1));
  Tape tape;
  tape.freeze({&w, &b});
  Var x = tape.leaf(Tensor::from_rows(1, 1, {2}));
  tape.backward(ops::sum(ops::linear(x, tape.param(w), tape.param(b))));
  CHECK(w.grad(0, 0) == 0);
  CHECK(tape.grad(x)(0, 0) == 3);
}

TEST_CASE("backward: non-finite gradient names the node") {
  // loss value is 0 but d(loss)/dp = max^2 overflows
  const Real big = std::numeric_limits<Real>::max();
  Parameter p("p", Tensor::from_rows(1, 1, {0}));
  Tape tape;
  Var pv = tape.param(p);
  Var loss = ops::scale(ops::sum(ops::mul(pv, tape.constant(Tensor::from_rows(1, 1, {big})))), big);
  CHECK(loss.value()(0, 0) == 0);
  try {
    tape.backward(loss);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("node " + std::to_string(pv.id)) != std::string::npos);
    CHECK(msg.find("parameter") != std::string::npos);
  }
}

TEST_CASE("backward: a tape is consumed once") {
  Parameter p("p", Tensor(1, 1, 1));
  Tape tape;
  Var l = ops::sum(tape.param(p));
  tape.backward(l);
  CHECK_THROWS_AS(tape.backward(l), ConfigError);
}

TEST_CASE("radam: zero gradient leaves parameters and decays moments") {
  Parameter p("p", Tensor::from_rows(1, 2, {1.5f, -2}));
  RAdam opt({&p}, 0.1);
  p.grad = Tensor::from_rows(1, 2, {0.5f, 0.5f});
  opt.step({&p});
  const Tensor after1 = p.value;
  const Real m1 = opt.state().m[0](0, 0), v1 = opt.state().v[0](0, 0);
  p.grad.zero();
  Parameter fresh("f", Tensor::from_rows(1, 1, {3}));
  RAdam opt2({&fresh}, 0.1);
  opt2.step({&fresh});
  CHECK(fresh.value(0, 0) == 3);
  opt.step({&p});
  CHECK(opt.state().m[0](0, 0) == doctest::Approx(0.9 * m1));
  CHECK(opt.state().v[0](0, 0) == doctest::Approx(0.999 * v1));
  (void)after1;
}

TEST_CASE("radam: first step takes the momentum-only branch") {
  CHECK(RAdam::rho(1, 0.999) == doctest::Approx(1.0));
  CHECK(RAdam::rho(4, 0.999) < 4.0);
  CHECK(RAdam::rho(5, 0.999) > 4.0);
  Parameter p("p", Tensor::from_rows(1, 1, {0}));
  RAdam opt({&p}, 0.1, 0.9, 0.999);
  p.grad(0, 0) = 1;
  opt.step({&p});
  CHECK(p.value(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("radam: repeated gradients move monotonically downhill") {
  Parameter p("p", Tensor::from_rows(1, 1, {0}));
  RAdam opt({&p}, 0.01);
  Real prev = p.value(0, 0);
  for (int i = 0; i < 20; ++i) {
    p.grad(0, 0) = 2;
    opt.step({&p});
    CHECK(p.value(0, 0) < prev);
    prev = p.value(0, 0);
  }
}

TEST_CASE("radam: adaptive branch matches a hand-rolled recurrence") {
  // independent double-precision replay of the published update rule
  Parameter p("p", Tensor::from_rows(1, 1, {0.3f}));
  RAdam opt({&p}, 0.05, 0.9, 0.999);
  double theta = 0.3, m = 0, v = 0;
  const double rinf = 2 / (1 - 0.999) - 1;
  for (int t = 1; t <= 12; ++t) {
    const double g = std::sin(0.7 * t);
    p.grad(0, 0) = static_cast<Real>(g);
    opt.step({&p});
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t));
    const double b2t = std::pow(0.999, t);
    const double rt = rinf - 2 * t * b2t / (1 - b2t);
    if (rt > 4) {
      const double r = std::sqrt((rt - 4) * (rt - 2) * rinf / ((rinf - 4) * (rinf - 2) * rt));
      theta -= 0.05 * r * mh / (std::sqrt(v / (1 - b2t)) + 1e-8);
    } else {
      theta -= 0.05 * mh;
    }
    CHECK(p.value(0, 0) == doctest::Approx(theta).epsilon(1e-5));
  }
}

TEST_CASE("radam: non-finite gradient skips the update") {
  Parameter p("p", Tensor::from_rows(1, 2, {1, 2}));
  RAdam opt({&p}, 0.1);
  p.grad = Tensor::from_rows(1, 2, {1, NAN});
  CHECK_THROWS_AS(opt.step({&p}), NumericError);
  CHECK(opt.step_count() == 0);
  CHECK(p.value(0, 0) == 1);
  CHECK(opt.state().m[0](0, 0) == 0);
}

TEST_CASE("clip_gradients: elementwise clamp and idempotence") {
  Parameter p("p", Tensor(1, 3));
  p.grad = Tensor::from_rows(1, 3, {0.5f, 3.7f, -2});
  clip_gradients({&p});
  CHECK(p.grad(0, 0) == 0.5f);
  CHECK(p.grad(0, 1) == 1);
  CHECK(p.grad(0, 2) == -1);
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    p.grad = random_tensor(1, 3, rng, 4.0);
    clip_gradients({&p});
    Tensor once = p.grad;
    clip_gradients({&p});
    CHECK(bitwise_equal(once, p.grad));
  }
}

TEST_CASE("clip_gradients: global norm mode") {
  Parameter a("a", Tensor(1, 2)), b("b", Tensor(1, 1));
  a.grad = Tensor::from_rows(1, 2, {3, 0});
  b.grad = Tensor::from_rows(1, 1, {4});
  clip_gradients({&a, &b}, ClipMode::GlobalNorm, 1);
  CHECK(a.grad(0, 0) == doctest::Approx(0.6));
  CHECK(b.grad(0, 0) == doctest::Approx(0.8));
}

TEST_CASE("reparam_sample examples") {
  Tensor mean = Tensor::from_rows(1, 2, {1, 1});
  Tensor noise = Tensor::from_rows(1, 2, {2, -1});
  Tensor z = reparam_sample(mean, Real(0.3), noise);
  CHECK(z(0, 0) == doctest::Approx(1.6));
  CHECK(z(0, 1) == doctest::Approx(0.7));
  Tensor z0 = reparam_sample(mean, Real(0), noise);
  CHECK(bitwise_equal(z0, mean));
  Tensor zn = reparam_sample(Tensor(1, 2), Real(1), noise);
  CHECK(bitwise_equal(zn, noise));
  // gradient reaches the mean with factor one
  Parameter m("m", mean);
  Tape tape;
  tape.backward(ops::sum(reparam_sample(tape, tape.param(m), Real(0.3), noise)));
  CHECK(m.grad(0, 0) == 1);
  CHECK(m.grad(0, 1) == 1);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(11);
  DenseNet net("net", {.in = 4, .aux = 2, .hidden = {5}, .out = 3, .concat_aux = true,
                       .layer_norm = true},
               rng);
  RAdam opt(net.parameters(), 1e-3);
  for (Parameter* p : net.parameters()) p->grad = random_tensor(p->value.rows, p->value.cols, rng);
  opt.step(net.parameters());
  const auto dir = std::filesystem::temp_directory_path() / "cvae_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "net.ckpt").string();
  save_checkpoint(path, net.parameters(), &opt, {{"epoch", 3}});

  Rng other(99);
  DenseNet copy("net", net.config(), other);
  RAdam opt2(copy.parameters(), 5e-2);
  nlohmann::json meta;
  load_checkpoint(path, copy.parameters(), &opt2, &meta);
  CHECK(meta["epoch"] == 3);
  auto a = net.parameters(), b = copy.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bitwise_equal(a[i]->value, b[i]->value));
    CHECK(bitwise_equal(opt.state().m[i], opt2.state().m[i]));
    CHECK(bitwise_equal(opt.state().v[i], opt2.state().v[i]));
  }
  CHECK(opt2.step_count() == 1);
  CHECK(opt2.lr() == 1e-3);
  // rewriting the same content gives the same bytes
  const std::string h1 = file_hash(path);
  save_checkpoint(path, copy.parameters(), &opt2, {{"epoch", 3}});
  CHECK(file_hash(path) == h1);

  DenseNet wrong("net", {.in = 3, .hidden = {5}, .out = 3}, other);
  CHECK_THROWS_AS(load_checkpoint(path, wrong.parameters()), DataError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing").string(), net.parameters()), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("parallel kernels agree with the serial reference") {
  Rng rng(12);
  for (auto [m, n, k] : {std::tuple{1, 1, 1}, {3, 7, 5}, {64, 128, 96}, {257, 33, 129}}) {
    Tensor A = random_tensor(m, k, rng), Bt = random_tensor(n, k, rng), Bn = random_tensor(k, n, rng);
    Tensor At = random_tensor(k, m, rng);
    Tensor c1(m, n, 1), c2(m, n, 1);
    kernels::gemm_nt(m, n, k, A.data.data(), Bt.data.data(), c1.data.data(), true);
    kernels::reference::gemm_nt(m, n, k, A.data.data(), Bt.data.data(), c2.data.data(), true);
    for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1.data[i] == doctest::Approx(c2.data[i]).epsilon(1e-4));
    kernels::gemm_nn(m, n, k, A.data.data(), Bn.data.data(), c1.data.data(), false);
    kernels::reference::gemm_nn(m, n, k, A.data.data(), Bn.data.data(), c2.data.data(), false);
    for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1.data[i] == doctest::Approx(c2.data[i]).epsilon(1e-4));
    kernels::gemm_tn(m, n, k, At.data.data(), Bn.data.data(), c1.data.data(), false);
    kernels::reference::gemm_tn(m, n, k, At.data.data(), Bn.data.data(), c2.data.data(), false);
    for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1.data[i] == doctest::Approx(c2.data[i]).epsilon(1e-4));
  }
  Tensor x = random_tensor(70, 40, rng, 3.0), y1(70, 40), y2(70, 40);
  std::vector<Real> r1(70), r2(70);
  kernels::layer_norm_forward(70, 40, x.data.data(), Real(1e-5), y1.data.data(), r1.data());
  kernels::reference::layer_norm_forward(70, 40, x.data.data(), Real(1e-5), y2.data.data(), r2.data());
  CHECK(bitwise_equal(y1, y2));
}
