#pragma once

#include <Eigen/Core>

namespace habmap::nnet {

/// C = alpha * op(A) * op(B) + beta * C for row-major operands, where op(A) is
/// (m, k) and op(B) is (k, n).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Idx = Eigen::Index;
    Eigen::Map<Mat> cm(c, static_cast<Idx>(m), static_cast<Idx>(n));
    const Eigen::Map<const Mat> am(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k));
    const Eigen::Map<const Mat> bm(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n));
    if (beta == T{0}) {
        cm.setZero();
    } else if (beta != T{1}) {
        cm *= beta;
    }
    if (!trans_a && !trans_b) {
        cm.noalias() += alpha * am * bm;
    } else if (trans_a && !trans_b) {
        cm.noalias() += alpha * am.transpose() * bm;
    } else if (!trans_a && trans_b) {
        cm.noalias() += alpha * am * bm.transpose();
    } else {
        cm.noalias() += alpha * am.transpose() * bm.transpose();
    }
}

} // namespace habmap::nnet
