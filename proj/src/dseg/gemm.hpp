#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "dseg/common.hpp"

namespace dseg {

// Blocked row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
//
// Parallelism is restricted to disjoint (i, j) tiles of C; the k accumulation
// for every output element always runs in ascending k order on one thread, so
// results are bit-identical for any thread count. That property is load-bearing:
// the layer kernels promise determinism independent of internal parallelism.
//
// The inner loop is written i-k-j so the compiler vectorizes over contiguous
// rows of B and C. Non-transposed operands are consumed in place; transposed
// ones are packed per k-panel so the hot loop stays on unit-stride data.

namespace gemm_detail {

constexpr int64_t kBlockM = 64;
constexpr int64_t kBlockN = 512;
constexpr int64_t kBlockK = 256;

template <class T>
inline void kernel_tile(const T* ap, int64_t ars, const T* bp, int64_t brs, T* c,
                        int64_t ldc, int64_t ib, int64_t jb, int64_t kb, T alpha) {
  // 4-row unrolling amortizes the B row loads across C rows.
  int64_t i = 0;
  for (; i + 4 <= ib; i += 4) {
    T* c0 = c + (i + 0) * ldc;
    T* c1 = c + (i + 1) * ldc;
    T* c2 = c + (i + 2) * ldc;
    T* c3 = c + (i + 3) * ldc;
    for (int64_t k = 0; k < kb; ++k) {
      const T* br = bp + k * brs;
      const T a0 = alpha * ap[(i + 0) * ars + k];
      const T a1 = alpha * ap[(i + 1) * ars + k];
      const T a2 = alpha * ap[(i + 2) * ars + k];
      const T a3 = alpha * ap[(i + 3) * ars + k];
      for (int64_t j = 0; j < jb; ++j) {
        const T bv = br[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < ib; ++i) {
    T* cr = c + i * ldc;
    for (int64_t k = 0; k < kb; ++k) {
      const T av = alpha * ap[i * ars + k];
      const T* br = bp + k * brs;
      for (int64_t j = 0; j < jb; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace gemm_detail

template <class T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
  using namespace gemm_detail;
  if (m <= 0 || n <= 0) return;

  if (beta == T(0)) {
    for (int64_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, T(0));
  } else if (beta != T(1)) {
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
  }
  if (k <= 0 || alpha == T(0)) return;

  const int64_t mtiles = (m + kBlockM - 1) / kBlockM;
  const int64_t ntiles = (n + kBlockN - 1) / kBlockN;

#pragma omp parallel for collapse(2) schedule(static) if (mtiles * ntiles > 1)
  for (int64_t it = 0; it < mtiles; ++it) {
    for (int64_t jt = 0; jt < ntiles; ++jt) {
      const int64_t i0 = it * kBlockM;
      const int64_t j0 = jt * kBlockN;
      const int64_t ib = std::min(kBlockM, m - i0);
      const int64_t jb = std::min(kBlockN, n - j0);
      thread_local std::vector<T> apack, bpack;
      if (trans_a) apack.resize(static_cast<size_t>(kBlockM * kBlockK));
      if (trans_b) bpack.resize(static_cast<size_t>(kBlockK * kBlockN));
      for (int64_t k0 = 0; k0 < k; k0 += kBlockK) {
        const int64_t kb = std::min(kBlockK, k - k0);
        const T* ap;
        int64_t ars;
        if (!trans_a) {
          ap = a + i0 * lda + k0;
          ars = lda;
        } else {
          for (int64_t i = 0; i < ib; ++i)
            for (int64_t kk = 0; kk < kb; ++kk)
              apack[static_cast<size_t>(i * kb + kk)] = a[(k0 + kk) * lda + (i0 + i)];
          ap = apack.data();
          ars = kb;
        }
        const T* bp;
        int64_t brs;
        if (!trans_b) {
          bp = b + k0 * ldb + j0;
          brs = ldb;
        } else {
          for (int64_t kk = 0; kk < kb; ++kk)
            for (int64_t j = 0; j < jb; ++j)
              bpack[static_cast<size_t>(kk * jb + j)] = b[(j0 + j) * ldb + (k0 + kk)];
          bp = bpack.data();
          brs = jb;
        }
        kernel_tile(ap, ars, bp, brs, c + i0 * ldc + j0, ldc, ib, jb, kb, alpha);
      }
    }
  }
}

}  // namespace dseg
