#pragma once

#include <Eigen/Core>

#include <cstddef>

namespace chs::blas {

/// C = alpha * op(A) op(B) + beta * C on row-major matrices with leading
/// dimensions lda/ldb/ldc; op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const Mat, Eigen::Unaligned, Stride>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Eigen::Map<Mat, Eigen::Unaligned, Stride> C(c, ei(m), ei(n), Stride(ei(ldc)));
  if (beta == T(0)) {
    C.setZero();
  } else if (beta != T(1)) {
    C *= beta;
  }
  if (m == 0 || n == 0 || k == 0) return;
  const CMap A(a, trans_a ? ei(k) : ei(m), trans_a ? ei(m) : ei(k), Stride(ei(lda)));
  const CMap B(b, trans_b ? ei(n) : ei(k), trans_b ? ei(k) : ei(n), Stride(ei(ldb)));
  if (!trans_a && !trans_b) C.noalias() += alpha * A * B;
  else if (trans_a && !trans_b) C.noalias() += alpha * A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() += alpha * A * B.transpose();
  else C.noalias() += alpha * A.transpose() * B.transpose();
}

}  // namespace chs::blas
