// OpenMP/Eigen kernels against the serial reference loops.
// Shapes follow the training batches: 128-row batches through 64..128-wide
// layers, and the six-expert blend of the policy.

#include <benchmark/benchmark.h>

#include <vector>

#include "controlvae/kernels.hpp"

using namespace controlvae;

namespace {

std::vector<Real> filled(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Real> v(n);
  for (Real& x : v) x = static_cast<Real>(rng.normal());
  return v;
}

template <auto Kernel>
void gemm(benchmark::State& st) {
  const int m = static_cast<int>(st.range(0)), n = static_cast<int>(st.range(1)),
            k = static_cast<int>(st.range(2));
  const auto a = filled(static_cast<std::size_t>(m) * k, 1);
  const auto b = filled(static_cast<std::size_t>(n) * k, 2);
  std::vector<Real> c(static_cast<std::size_t>(m) * n);
  for (auto _ : st) {
    Kernel(m, n, k, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * 2LL * m * n * k);
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
  b->Args({128, 64, 106})->Args({128, 128, 128})->Args({512, 128, 128})->Args({1024, 256, 256});
}

template <auto Forward>
void ln_forward(benchmark::State& st) {
  const int rows = static_cast<int>(st.range(0)), cols = static_cast<int>(st.range(1));
  const auto x = filled(static_cast<std::size_t>(rows) * cols, 3);
  std::vector<Real> y(x.size()), rstd(rows);
  for (auto _ : st) {
    Forward(rows, cols, x.data(), Real(1e-5), y.data(), rstd.data());
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(st.iterations() * rows * cols);
}

template <auto Backward>
void ln_backward(benchmark::State& st) {
  const int rows = static_cast<int>(st.range(0)), cols = static_cast<int>(st.range(1));
  const auto x = filled(static_cast<std::size_t>(rows) * cols, 4);
  const auto dy = filled(x.size(), 5);
  std::vector<Real> y(x.size()), rstd(rows), dx(x.size());
  kernels::reference::layer_norm_forward(rows, cols, x.data(), Real(1e-5), y.data(), rstd.data());
  for (auto _ : st) {
    Backward(rows, cols, y.data(), rstd.data(), dy.data(), dx.data());
    benchmark::DoNotOptimize(dx.data());
  }
  st.SetItemsProcessed(st.iterations() * rows * cols);
}

template <auto Blend>
void blend(benchmark::State& st) {
  const int rows = static_cast<int>(st.range(0)), cols = static_cast<int>(st.range(1)), k = 6;
  const auto gate = filled(static_cast<std::size_t>(rows) * k, 6);
  std::vector<std::vector<Real>> ys;
  std::vector<kernels::BlendTerm> terms;
  for (int i = 0; i < k; ++i) ys.push_back(filled(static_cast<std::size_t>(rows) * cols, 10 + i));
  for (const auto& y : ys) terms.push_back({y.data(), cols});
  std::vector<Real> out(static_cast<std::size_t>(rows) * cols);
  for (auto _ : st) {
    Blend(rows, cols, k, gate.data(), terms, out.data());
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * rows * cols * k);
}

void row_shapes(benchmark::internal::Benchmark* b) { b->Args({128, 64})->Args({128, 128})->Args({1024, 256}); }

}  // namespace

BENCHMARK(gemm<kernels::gemm_nt>)->Name("gemm_nt/parallel")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::reference::gemm_nt>)->Name("gemm_nt/serial")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::gemm_nn>)->Name("gemm_nn/parallel")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::reference::gemm_nn>)->Name("gemm_nn/serial")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::gemm_tn>)->Name("gemm_tn/parallel")->Apply(gemm_shapes);
BENCHMARK(gemm<kernels::reference::gemm_tn>)->Name("gemm_tn/serial")->Apply(gemm_shapes);
BENCHMARK(ln_forward<kernels::layer_norm_forward>)->Name("layer_norm_forward/parallel")->Apply(row_shapes);
BENCHMARK(ln_forward<kernels::reference::layer_norm_forward>)->Name("layer_norm_forward/serial")->Apply(row_shapes);
BENCHMARK(ln_backward<kernels::layer_norm_backward>)->Name("layer_norm_backward/parallel")->Apply(row_shapes);
BENCHMARK(ln_backward<kernels::reference::layer_norm_backward>)->Name("layer_norm_backward/serial")->Apply(row_shapes);
BENCHMARK(blend<kernels::blend>)->Name("blend/parallel")->Apply(row_shapes);
BENCHMARK(blend<kernels::reference::blend>)->Name("blend/serial")->Apply(row_shapes);

BENCHMARK_MAIN();
