#pragma once

// Dense kernels shared by the graph ops. float and double products go to
// BLAS; other types use plain loops.

#include <cblas.h>

#include <cstddef>
#include <type_traits>

namespace hsa_lab::detail {

/// Dot product with eight independent partial sums so the loop vectorizes
/// without relaxed floating-point flags. Summation order is fixed.
template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T lane[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) lane[l] += a[i + l] * b[i + l];
  }
  T acc = ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

/// Row-major c[m,n] = alpha * op(a) * op(b) + beta * c with leading
/// dimensions, so strided head slices can be used in place.
template <class T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a, std::size_t lda,
          const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    if (k == 0) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
      }
      return;
    }
    const auto i = [](std::size_t v) { return static_cast<blasint>(v); };
    const auto t = [](bool x) { return x ? CblasTrans : CblasNoTrans; };
    if constexpr (std::is_same_v<T, float>) {
      cblas_sgemm(CblasRowMajor, t(ta), t(tb), i(m), i(n), i(k), alpha, a, i(lda), b, i(ldb), beta, c, i(ldc));
    } else {
      cblas_dgemm(CblasRowMajor, t(ta), t(tb), i(m), i(n), i(k), alpha, a, i(lda), b, i(ldb), beta, c, i(ldc));
    }
  } else {
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t s = 0; s < n; ++s) {
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p) acc += (ta ? a[p * lda + r] : a[r * lda + p]) * (tb ? b[s * ldb + p] : b[p * ldb + s]);
        c[r * ldc + s] = alpha * acc + beta * c[r * ldc + s];
      }
    }
  }
}

}  // namespace hsa_lab::detail
