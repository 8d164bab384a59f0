#include "controlvae/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

CONTROLVAE_NAMESPACE_BEGIN
namespace kernels {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using CMap = Eigen::Map<const RowMat, 0, Stride>;
using MMap = Eigen::Map<RowMat, 0, Stride>;

// Below this many multiply-adds a kernel runs on the calling thread.
constexpr long kParallelWork = 1L << 16;

int block_count(int rows, long work) {
  const int threads = max_threads();
  if (threads <= 1 || work < kParallelWork) return 1;
  return std::max(1, std::min(threads, rows / 8));
}

template <class Fn>
void for_row_blocks(int rows, long work, Fn&& fn) {
  const int blocks = block_count(rows, work);
  if (blocks == 1) {
    fn(0, rows);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(blocks)
  for (int b = 0; b < blocks; ++b) {
    const int r0 = static_cast<int>(static_cast<long>(rows) * b / blocks);
    const int r1 = static_cast<int>(static_cast<long>(rows) * (b + 1) / blocks);
    if (r1 > r0) fn(r0, r1);
  }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm_nt(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(C, C + static_cast<long>(m) * n, Real(0));
    return;
  }
  CMap b(B, n, k, Stride(k));
  for_row_blocks(m, static_cast<long>(m) * n * k, [&](int r0, int r1) {
    CMap a(A + static_cast<long>(r0) * k, r1 - r0, k, Stride(k));
    MMap c(C + static_cast<long>(r0) * n, r1 - r0, n, Stride(n));
    if (accumulate) c.noalias() += a * b.transpose();
    else c.noalias() = a * b.transpose();
  });
}

void gemm_nn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(C, C + static_cast<long>(m) * n, Real(0));
    return;
  }
  CMap b(B, k, n, Stride(n));
  for_row_blocks(m, static_cast<long>(m) * n * k, [&](int r0, int r1) {
    CMap a(A + static_cast<long>(r0) * k, r1 - r0, k, Stride(k));
    MMap c(C + static_cast<long>(r0) * n, r1 - r0, n, Stride(n));
    if (accumulate) c.noalias() += a * b;
    else c.noalias() = a * b;
  });
}

void gemm_tn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(C, C + static_cast<long>(m) * n, Real(0));
    return;
  }
  CMap b(B, k, n, Stride(n));
  // Split output rows, i.e. columns of A; the reduction over k stays inside
  // one block so the result does not depend on the thread count.
  for_row_blocks(m, static_cast<long>(m) * n * k, [&](int r0, int r1) {
    CMap a(A + r0, k, r1 - r0, Stride(m));
    MMap c(C + static_cast<long>(r0) * n, r1 - r0, n, Stride(n));
    if (accumulate) c.noalias() += a.transpose() * b;
    else c.noalias() = a.transpose() * b;
  });
}

void layer_norm_forward(int rows, int cols, const Real* x, Real eps, Real* y,
                        Real* rstd) {
  for_row_blocks(rows, static_cast<long>(rows) * cols * 4, [&](int r0, int r1) {
    reference::layer_norm_forward(r1 - r0, cols, x + static_cast<long>(r0) * cols,
                                  eps, y + static_cast<long>(r0) * cols, rstd + r0);
  });
}

void layer_norm_backward(int rows, int cols, const Real* y, const Real* rstd,
                         const Real* dy, Real* dx) {
  for_row_blocks(rows, static_cast<long>(rows) * cols * 4, [&](int r0, int r1) {
    const long off = static_cast<long>(r0) * cols;
    reference::layer_norm_backward(r1 - r0, cols, y + off, rstd + r0, dy + off,
                                   dx + off);
  });
}

void blend(int rows, int cols, int k, const Real* gate,
           std::span<const BlendTerm> terms, Real* out) {
  for_row_blocks(rows, static_cast<long>(rows) * cols * k, [&](int r0, int r1) {
    for (int r = r0; r < r1; ++r) {
      Eigen::Map<Eigen::Matrix<Real, Eigen::Dynamic, 1>> o(
          out + static_cast<long>(r) * cols, cols);
      o.setZero();
      for (int j = 0; j < k; ++j) {
        const BlendTerm& t = terms[j];
        Eigen::Map<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> yv(
            t.data + static_cast<long>(r) * t.row_stride, cols);
        o += gate[static_cast<long>(r) * k + j] * yv;
      }
    }
  });
}

namespace reference {

void gemm_nt(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      Real s = 0;
      for (int p = 0; p < k; ++p) s += A[static_cast<long>(i) * k + p] * B[static_cast<long>(j) * k + p];
      Real& c = C[static_cast<long>(i) * n + j];
      c = accumulate ? c + s : s;
    }
  }
}

void gemm_nn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      Real s = 0;
      for (int p = 0; p < k; ++p) s += A[static_cast<long>(i) * k + p] * B[static_cast<long>(p) * n + j];
      Real& c = C[static_cast<long>(i) * n + j];
      c = accumulate ? c + s : s;
    }
  }
}

void gemm_tn(int m, int n, int k, const Real* A, const Real* B, Real* C,
             bool accumulate) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      Real s = 0;
      for (int p = 0; p < k; ++p) s += A[static_cast<long>(p) * m + i] * B[static_cast<long>(p) * n + j];
      Real& c = C[static_cast<long>(i) * n + j];
      c = accumulate ? c + s : s;
    }
  }
}

void layer_norm_forward(int rows, int cols, const Real* x, Real eps, Real* y,
                        Real* rstd) {
  for (int r = 0; r < rows; ++r) {
    const Real* xr = x + static_cast<long>(r) * cols;
    Real* yr = y + static_cast<long>(r) * cols;
    double mean = 0;
    for (int c = 0; c < cols; ++c) mean += xr[c];
    mean /= cols;
    double var = 0;
    for (int c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= cols;
    const double rs = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c) yr[c] = static_cast<Real>((xr[c] - mean) * rs);
    rstd[r] = static_cast<Real>(rs);
  }
}

void layer_norm_backward(int rows, int cols, const Real* y, const Real* rstd,
                         const Real* dy, Real* dx) {
  // dx = rstd * (dy - mean(dy) - y * mean(dy * y))
  for (int r = 0; r < rows; ++r) {
    const Real* yr = y + static_cast<long>(r) * cols;
    const Real* gr = dy + static_cast<long>(r) * cols;
    Real* dr = dx + static_cast<long>(r) * cols;
    double mg = 0, mgy = 0;
    for (int c = 0; c < cols; ++c) {
      mg += gr[c];
      mgy += static_cast<double>(gr[c]) * yr[c];
    }
    mg /= cols;
    mgy /= cols;
    for (int c = 0; c < cols; ++c) {
      dr[c] += static_cast<Real>(rstd[r] * (gr[c] - mg - yr[c] * mgy));
    }
  }
}

void blend(int rows, int cols, int k, const Real* gate,
           std::span<const BlendTerm> terms, Real* out) {
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      Real s = 0;
      for (int j = 0; j < k; ++j) {
        s += gate[static_cast<long>(r) * k + j] *
             terms[j].data[static_cast<long>(r) * terms[j].row_stride + c];
      }
      out[static_cast<long>(r) * cols + c] = s;
    }
  }
}

}  // namespace reference
}  // namespace kernels
CONTROLVAE_NAMESPACE_END
