#pragma once

#include <algorithm>
#include <cstddef>

#include "xsep/parallel.hpp"

namespace xsep {

namespace detail {

// Restrict-qualified micro-kernels so the inner loops vectorize without
// runtime alias versioning.

template <typename T>
inline void axpy4(T* __restrict c, const T* __restrict b0, const T* __restrict b1,
                  const T* __restrict b2, const T* __restrict b3, T a0, T a1, T a2, T a3,
                  std::size_t n) {
    for (std::size_t j = 0; j < n; ++j)
        c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
}

template <typename T>
inline void axpy1(T* __restrict c, const T* __restrict b, T a, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
}

template <typename T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
    T acc0 = T(0), acc1 = T(0), acc2 = T(0), acc3 = T(0);
    std::size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        acc0 += a[k] * b[k];
        acc1 += a[k + 1] * b[k + 1];
        acc2 += a[k + 2] * b[k + 2];
        acc3 += a[k + 3] * b[k + 3];
    }
    T acc = (acc0 + acc1) + (acc2 + acc3);
    for (; k < n; ++k) acc += a[k] * b[k];
    return acc;
}

constexpr std::size_t kColBlock = 1024;  // output columns per L1-resident pass

}  // namespace detail

// Row-major GEMM kernels over raw buffers, restricted to the shapes the
// convolution and dense paths need. Each variant computes rows [i0, i1) of C
// so callers can parallelize over disjoint row blocks; accumulation order is
// fixed, so results do not depend on the thread count.

// C[i][j] (+)= sum_k A[i][k] * B[k][j]
template <typename T>
void gemm_nn_rows(std::size_t i0, std::size_t i1, std::size_t N, std::size_t K, const T* A,
                  const T* B, T* C, bool accumulate) {
    for (std::size_t i = i0; i < i1; ++i) {
        T* crow = C + i * N;
        if (!accumulate)
            for (std::size_t j = 0; j < N; ++j) crow[j] = T(0);
        const T* arow = A + i * K;
        for (std::size_t jb = 0; jb < N; jb += detail::kColBlock) {
            const std::size_t jn = std::min(detail::kColBlock, N - jb);
            std::size_t k = 0;
            for (; k + 4 <= K; k += 4)
                detail::axpy4(crow + jb, B + k * N + jb, B + (k + 1) * N + jb,
                              B + (k + 2) * N + jb, B + (k + 3) * N + jb, arow[k], arow[k + 1],
                              arow[k + 2], arow[k + 3], jn);
            for (; k < K; ++k) detail::axpy1(crow + jb, B + k * N + jb, arow[k], jn);
        }
    }
}

// C[i][j] (+)= sum_k A[i][k] * B[j][k]   (B used transposed)
template <typename T>
void gemm_nt_rows(std::size_t i0, std::size_t i1, std::size_t N, std::size_t K, const T* A,
                  const T* B, T* C, bool accumulate) {
    for (std::size_t i = i0; i < i1; ++i) {
        const T* arow = A + i * K;
        T* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const T acc = detail::dot(arow, B + j * K, K);
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// C[i][j] (+)= sum_k A[k][i] * B[k][j]   (A used transposed, A is K x M)
template <typename T>
void gemm_tn_rows(std::size_t i0, std::size_t i1, std::size_t M, std::size_t N, std::size_t K,
                  const T* A, const T* B, T* C, bool accumulate) {
    for (std::size_t i = i0; i < i1; ++i) {
        T* crow = C + i * N;
        if (!accumulate)
            for (std::size_t j = 0; j < N; ++j) crow[j] = T(0);
        for (std::size_t jb = 0; jb < N; jb += detail::kColBlock) {
            const std::size_t jn = std::min(detail::kColBlock, N - jb);
            std::size_t k = 0;
            for (; k + 4 <= K; k += 4)
                detail::axpy4(crow + jb, B + k * N + jb, B + (k + 1) * N + jb,
                              B + (k + 2) * N + jb, B + (k + 3) * N + jb, A[k * M + i],
                              A[(k + 1) * M + i], A[(k + 2) * M + i], A[(k + 3) * M + i], jn);
            for (; k < K; ++k) detail::axpy1(crow + jb, B + k * N + jb, A[k * M + i], jn);
        }
    }
}

template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
    parallel_for(M, [&](std::size_t lo, std::size_t hi) {
        gemm_nn_rows(lo, hi, N, K, A, B, C, accumulate);
    });
}

template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
    parallel_for(M, [&](std::size_t lo, std::size_t hi) {
        gemm_nt_rows(lo, hi, N, K, A, B, C, accumulate);
    });
}

template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
    parallel_for(M, [&](std::size_t lo, std::size_t hi) {
        gemm_tn_rows(lo, hi, M, N, K, A, B, C, accumulate);
    });
}

}  // namespace xsep
