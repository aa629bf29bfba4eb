#include "unicombine/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace unicombine::kernels {

namespace {

// Parallelize only when there is enough work to pay for the fork.
constexpr std::int64_t kParallelFlops = 1 << 15;

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename S>
void gemm_nn_serial(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      S acc = accumulate ? c[i * n + j] : S(0);
      for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlops)
  for (std::int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, S(0));
    const S* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const S aip = arow[p];
      const S* brow = b + p * n;
#pragma omp simd
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename S>
void gemm_nt_serial(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      S acc = accumulate ? c[i * n + j] : S(0);
      for (std::int64_t p = 0; p < k; ++p) acc += a[i * k + p] * b[j * k + p];
      c[i * n + j] = acc;
    }
  }
}

template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  // Four output columns per pass keeps the a-row in registers.
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlops)
  for (std::int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    std::int64_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const S* b0 = b + j * k;
      const S* b1 = b0 + k;
      const S* b2 = b1 + k;
      const S* b3 = b2 + k;
      S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
      for (std::int64_t p = 0; p < k; ++p) {
        const S x = arow[p];
        s0 += x * b0[p];
        s1 += x * b1[p];
        s2 += x * b2[p];
        s3 += x * b3[p];
      }
      if (accumulate) {
        crow[j] += s0;
        crow[j + 1] += s1;
        crow[j + 2] += s2;
        crow[j + 3] += s3;
      } else {
        crow[j] = s0;
        crow[j + 1] = s1;
        crow[j + 2] = s2;
        crow[j + 3] = s3;
      }
    }
    for (; j < n; ++j) {
      const S* brow = b + j * k;
      S s = 0;
#pragma omp simd reduction(+ : s)
      for (std::int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

template <typename S>
void gemm_tn_serial(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      S acc = accumulate ? c[i * n + j] : S(0);
      for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[p * n + j];
      c[i * n + j] = acc;
    }
  }
}

template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * k * n > kParallelFlops)
  for (std::int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, S(0));
    for (std::int64_t p = 0; p < k; ++p) {
      const S api = a[p * m + i];
      if (api == S(0)) continue;
      const S* brow = b + p * n;
#pragma omp simd
      for (std::int64_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

template <typename S>
void softmax_rows_serial(const S* x, S* out, std::int64_t rows, std::int64_t cols,
                         S scale) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = x + r * cols;
    S* yr = out + r * cols;
    S mx = xr[0] * scale;
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j] * scale);
    S total = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] * scale - mx);
      total += yr[j];
    }
    for (std::int64_t j = 0; j < cols; ++j) yr[j] /= total;
  }
}

template <typename S>
void softmax_rows(const S* x, S* out, std::int64_t rows, std::int64_t cols, S scale) {
#pragma omp parallel for schedule(static) if (rows * cols > kParallelFlops)
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = x + r * cols;
    S* yr = out + r * cols;
    S mx = xr[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    mx *= scale;
    S total = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] * scale - mx);
      total += yr[j];
    }
    const S inv = S(1) / total;
    for (std::int64_t j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

#define UC_KERNELS(S)                                                                    \
  template void gemm_nn_serial<S>(const S*, const S*, S*, std::int64_t, std::int64_t,   \
                                  std::int64_t, bool);                                   \
  template void gemm_nn<S>(const S*, const S*, S*, std::int64_t, std::int64_t,          \
                           std::int64_t, bool);                                          \
  template void gemm_nt_serial<S>(const S*, const S*, S*, std::int64_t, std::int64_t,   \
                                  std::int64_t, bool);                                   \
  template void gemm_nt<S>(const S*, const S*, S*, std::int64_t, std::int64_t,          \
                           std::int64_t, bool);                                          \
  template void gemm_tn_serial<S>(const S*, const S*, S*, std::int64_t, std::int64_t,   \
                                  std::int64_t, bool);                                   \
  template void gemm_tn<S>(const S*, const S*, S*, std::int64_t, std::int64_t,          \
                           std::int64_t, bool);                                          \
  template void softmax_rows_serial<S>(const S*, S*, std::int64_t, std::int64_t, S);    \
  template void softmax_rows<S>(const S*, S*, std::int64_t, std::int64_t, S);

UC_KERNELS(float)
UC_KERNELS(double)

#undef UC_KERNELS

}  // namespace unicombine::kernels
