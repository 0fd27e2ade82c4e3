#pragma once

// Raw matrix products, routed through Eigen. Everything autograd-related sits
// above this layer; only the inner products are delegated.

#include <Eigen/Core>
#include <cstdint>

#include "epd/common.hpp"

namespace epd {

namespace detail {
template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;
}  // namespace detail

// C[m,n] = alpha * opA(A) * opB(B) + beta * C, row-major with leading strides.
// opA(A) is [m,k]; if trans_a, A itself is stored [k,m] (stride lda), likewise B.
template <class T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha, const T* a,
          int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc) {
    using detail::ECMap;
    using detail::EMap;
    EMap<T> C(c, m, n, Eigen::OuterStride<>(ldc));
    ECMap<T> A(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
    ECMap<T> B(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));

    auto apply = [&](const auto& prod) {
        if (beta == T(0)) {
            if (alpha == T(1))
                C.noalias() = prod;
            else
                C.noalias() = alpha * prod;
        } else {
            if (beta != T(1)) C *= beta;
            if (alpha == T(1))
                C.noalias() += prod;
            else
                C.noalias() += alpha * prod;
        }
    };

    if (!trans_a && !trans_b)
        apply(A * B);
    else if (!trans_a && trans_b)
        apply(A * B.transpose());
    else if (trans_a && !trans_b)
        apply(A.transpose() * B);
    else
        apply(A.transpose() * B.transpose());
}

// Convenience: contiguous row-major C[m,n] = opA(A)·opB(B)
template <class T>
void matmul_raw(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
                const T* b, T* c, T alpha = T(1), T beta = T(0)) {
    gemm<T>(trans_a, trans_b, m, n, k, alpha, a, trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

}  // namespace epd
