#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <string>

#include "mwmhe/errors.hpp"

namespace mwmhe {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

template <typename Derived>
MatrixX<typename Derived::Scalar> symmetrize(const Eigen::MatrixBase<Derived>& m) {
  return (m + m.transpose()) / typename Derived::Scalar(2);
}

/// Cholesky factorization of a symmetric positive-definite matrix. On failure
/// a single diagonal jitter of 1e-12 * trace / n is tried before giving up.
template <typename Scalar>
class SpdFactor {
 public:
  SpdFactor() = default;

  explicit SpdFactor(const MatrixX<Scalar>& m, const char* what = "matrix") { compute(m, what); }

  SpdFactor& compute(const MatrixX<Scalar>& m, const char* what = "matrix") {
    if (m.rows() != m.cols()) {
      throw DimensionError(std::string(what) + " is not square");
    }
    llt_.compute(m);
    if (llt_.info() == Eigen::Success && positive_pivots()) return *this;
    const Eigen::Index n = m.rows();
    const Scalar jitter = n > 0 ? Scalar(1e-12) * std::abs(m.trace()) / Scalar(n) : Scalar(0);
    llt_.compute(m + jitter * MatrixX<Scalar>::Identity(n, n));
    if (llt_.info() != Eigen::Success || !positive_pivots()) {
      throw SingularUpdateError(std::string(what) + " is not symmetric positive definite");
    }
    return *this;
  }

  template <typename Rhs>
  auto solve(const Eigen::MatrixBase<Rhs>& rhs) const {
    return llt_.solve(rhs);
  }

  MatrixX<Scalar> inverse() const {
    const Eigen::Index n = llt_.matrixLLT().rows();
    return symmetrize(MatrixX<Scalar>(llt_.solve(MatrixX<Scalar>::Identity(n, n))));
  }

  /// Returns v' M^{-1} v.
  Scalar inverse_quadratic(const VectorX<Scalar>& v) const {
    const VectorX<Scalar> half = llt_.matrixL().solve(v);
    return half.squaredNorm();
  }

 private:
  bool positive_pivots() const {
    const auto diag = llt_.matrixLLT().diagonal();
    return (diag.array() > Scalar(0)).all() && diag.allFinite();
  }

  Eigen::LLT<MatrixX<Scalar>> llt_;
};

template <typename Scalar>
MatrixX<Scalar> spd_inverse(const MatrixX<Scalar>& m, const char* what = "matrix") {
  return SpdFactor<Scalar>(m, what).inverse();
}

/// Weighted squared norm in the inverse convention: v' W^{-1} v.
template <typename Scalar>
Scalar weighted_sq_norm(const VectorX<Scalar>& v, const MatrixX<Scalar>& weight) {
  return SpdFactor<Scalar>(weight, "weight").inverse_quadratic(v);
}

/// Tolerance below which a singular value counts as zero.
template <typename Scalar>
Scalar rank_tolerance(Eigen::Index rows, Eigen::Index cols, Scalar sigma_max) {
  return Scalar(std::max(rows, cols)) * sigma_max * Scalar(1e-12);
}

template <typename Derived>
Eigen::Index numerical_rank(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == Scalar(0)) return 0;
  const Scalar tol = rank_tolerance<Scalar>(m.rows(), m.cols(), sv(0));
  return (sv.array() > tol).count();
}

/// Orthonormal basis of {v : m v = 0}; columns = cols(m) - rank(m).
template <typename Derived>
MatrixX<typename Derived::Scalar> null_basis(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = m.cols();
  if (m.rows() == 0) return MatrixX<Scalar>::Identity(n, n);
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(m, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  Eigen::Index rank = 0;
  if (sv.size() > 0 && sv(0) > Scalar(0)) {
    const Scalar tol = rank_tolerance<Scalar>(m.rows(), m.cols(), sv(0));
    rank = (sv.array() > tol).count();
  }
  MatrixX<Scalar> basis = svd.matrixV().rightCols(n - rank);
  // Sign convention: the largest-magnitude entry of each column is positive.
  for (Eigen::Index c = 0; c < basis.cols(); ++c) {
    Eigen::Index i = 0;
    basis.col(c).cwiseAbs().maxCoeff(&i);
    if (basis(i, c) < Scalar(0)) basis.col(c) = -basis.col(c);
  }
  return basis;
}

/// Largest singular value.
template <typename Derived>
typename Derived::Scalar induced_norm(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.size() == 0) return Scalar(0);
  Eigen::JacobiSVD<MatrixX<Scalar>> svd(m);
  return svd.singularValues()(0);
}

template <typename Derived>
typename Derived::Scalar spectral_radius(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  if (m.size() == 0) return Scalar(0);
  Eigen::EigenSolver<MatrixX<Scalar>> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace mwmhe
