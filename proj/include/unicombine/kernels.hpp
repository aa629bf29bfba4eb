// Dense row-major compute kernels.
//
// Every kernel ships in two flavours: a `*_serial` reference written as the
// textbook loop nest, and an OpenMP-parallel version that the tensor engine
// calls. The parallel versions split work over output rows only, so each
// output element is produced by exactly one thread in a fixed order and the
// result does not depend on the thread count.
#pragma once

#include <cstdint>

namespace unicombine::kernels {

// c[m×n] (+)= a[m×k] · b[k×n]
template <typename S>
void gemm_nn_serial(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate);
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);

// c[m×n] (+)= a[m×k] · b[n×k]ᵀ
template <typename S>
void gemm_nt_serial(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate);
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);

// c[m×n] (+)= a[k×m]ᵀ · b[k×n]
template <typename S>
void gemm_tn_serial(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate);
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate);

// out[r×c] = row-wise softmax(scale · x). Row-max subtraction only.
template <typename S>
void softmax_rows_serial(const S* x, S* out, std::int64_t rows, std::int64_t cols,
                         S scale);
template <typename S>
void softmax_rows(const S* x, S* out, std::int64_t rows, std::int64_t cols, S scale);

// Number of threads the parallel kernels will use.
int max_threads();

}  // namespace unicombine::kernels
