#pragma once

#include <span>

#include "controlvae/common.hpp"

CONTROLVAE_NAMESPACE_BEGIN

// Dense kernels on row-major buffers. The default versions split the output
// rows across OpenMP threads and hand each block to Eigen; the reference
// namespace holds plain serial loops used as test oracles and as the
// benchmark baseline. All kernels write C = op(...) or, when `accumulate`
// is set, C += op(...).
namespace kernels {

// C[m,n] = A[m,k] * B[n,k]^T
void gemm_nt(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate);
// C[m,n] = A[m,k] * B[k,n]
void gemm_nn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate);
// C[m,n] = A[k,m]^T * B[k,n]
void gemm_tn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate);

// Per-row normalization to zero mean and unit variance. Writes the
// normalized rows to y and 1/sqrt(var + eps) per row to rstd.
void layer_norm_forward(int rows, int cols, const Real* x, Real eps, Real* y,
                        Real* rstd);
// dx += d(layer_norm)/dx applied to dy, given normalized output y.
void layer_norm_backward(int rows, int cols, const Real* y, const Real* rstd,
                         const Real* dy, Real* dx);

// out[r, :] = sum_k gate[r, k] * Y_k[r, :]. A term with row_stride 0 is a
// single row broadcast over the batch.
struct BlendTerm {
  const Real* data;
  int row_stride;
};
void blend(int rows, int cols, int k, const Real* gate,
           std::span<const BlendTerm> terms, Real* out);

// Number of threads the parallel kernels will use.
int max_threads();

namespace reference {
void gemm_nt(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate);
void gemm_nn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate);
void gemm_tn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate);
void layer_norm_forward(int rows, int cols, const Real* x, Real eps, Real* y,
                        Real* rstd);
void layer_norm_backward(int rows, int cols, const Real* y, const Real* rstd,
                         const Real* dy, Real* dx);
void blend(int rows, int cols, int k, const Real* gate,
           std::span<const BlendTerm> terms, Real* out);
}  // namespace reference

}  // namespace kernels

CONTROLVAE_NAMESPACE_END
