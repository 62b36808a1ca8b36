#pragma once

#include <cmath>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "kolmo/error.hpp"
#include "kolmo/quadrature.hpp"

namespace kolmo {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

namespace detail {

inline int numerical_rank(const Matrix& M, double rel_tol) {
  if (M.size() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(M);
  const auto& s = svd.singularValues();
  const double scale = s.size() ? s(0) : 0.0;
  if (scale == 0.0) return 0;
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > rel_tol * scale) ++rank;
  return rank;
}

}  // namespace detail

/// Smallest p with B^p = 0 (exactly, entrywise), or 0 when B is not nilpotent.
inline int nilpotency_index(const Matrix& B) {
  const auto N = B.rows();
  Matrix P = Matrix::Identity(N, N);
  for (Eigen::Index p = 1; p <= N; ++p) {
    P = P * B;
    if (P.cwiseAbs().maxCoeff() == 0.0) return static_cast<int>(p);
  }
  return 0;
}

/// exp(-sB). For nilpotent B the truncated power series is exact.
inline Matrix exp_minus(const Matrix& B, double s, int nil_index) {
  const auto N = B.rows();
  if (nil_index > 0) {
    Matrix E = Matrix::Identity(N, N);
    Matrix term = Matrix::Identity(N, N);
    for (int k = 1; k < nil_index; ++k) {
      term = term * B * (-s / k);
      E += term;
    }
    return E;
  }
  Matrix M = -s * B;
  return M.exp();
}

inline Matrix exp_minus(const Matrix& B, double s) { return exp_minus(B, s, nilpotency_index(B)); }

inline Matrix pad(const Matrix& S, Eigen::Index N) {
  Matrix out = Matrix::Zero(N, N);
  out.topLeftCorner(S.rows(), S.cols()) = S;
  return out;
}

/// C(t) = int_0^t E(s) Sbar E(s)^T ds with E(s) = exp(-sB) and Sbar the zero
/// padding of S. Nilpotent B: Gauss-Legendre with p+1 nodes (integrand is a
/// polynomial of degree 2(p-1)). Otherwise the Van Loan block exponential.
inline Matrix covariance_matrix(const Matrix& B, const Matrix& S, double t, int nil_index) {
  const auto N = B.rows();
  const Matrix Sbar = pad(S, N);
  if (nil_index > 0) {
    const auto rule = quad::gauss_legendre(static_cast<std::size_t>(nil_index + 1), 0.0, t);
    Matrix C = Matrix::Zero(N, N);
    for (std::size_t i = 0; i < rule.size(); ++i) {
      const Matrix E = exp_minus(B, rule.nodes[i], nil_index);
      C += rule.weights[i] * (E * Sbar * E.transpose());
    }
    return 0.5 * (C + C.transpose());
  }
  Matrix M = Matrix::Zero(2 * N, 2 * N);
  M.topLeftCorner(N, N) = B;
  M.topRightCorner(N, N) = Sbar;
  M.bottomRightCorner(N, N) = -B.transpose();
  Matrix F = (M * t).exp();
  Matrix C = F.bottomRightCorner(N, N).transpose() * F.topRightCorner(N, N);
  return 0.5 * (C + C.transpose());
}

inline Matrix covariance_matrix(const Matrix& B, const Matrix& S, double t) {
  return covariance_matrix(B, S, t, nilpotency_index(B));
}

}  // namespace kolmo
