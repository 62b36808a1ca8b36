#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <mutex>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kolmo/error.hpp"

namespace kolmo::quad {

struct Rule {
  std::vector<double> nodes;
  std::vector<double> weights;
  std::size_t size() const { return nodes.size(); }
};

namespace detail {

// Golub-Welsch: eigen-decomposition of the symmetric Jacobi matrix.
inline Rule golub_welsch(const Eigen::VectorXd& diag, const Eigen::VectorXd& offdiag, double mu0) {
  const auto n = diag.size();
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    J(i, i) = diag(i);
    if (i + 1 < n) J(i, i + 1) = J(i + 1, i) = offdiag(i);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  Rule r;
  r.nodes.resize(n);
  r.weights.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    r.nodes[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    r.weights[i] = mu0 * v0 * v0;
  }
  return r;
}

// Newton polish of Legendre roots; Golub-Welsch alone loses a few digits for large n.
inline void polish_legendre(Rule& r) {
  const std::size_t n = r.size();
  for (std::size_t i = 0; i < n; ++i) {
    double x = r.nodes[i];
    double dp = 0.0;
    for (int it = 0; it < 4; ++it) {
      double p0 = 1.0, p1 = x;
      for (std::size_t k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / static_cast<double>(k);
        p0 = p1;
        p1 = pk;
      }
      dp = static_cast<double>(n) * (x * p1 - p0) / (x * x - 1.0);
      x -= p1 / dp;
    }
    r.nodes[i] = x;
    r.weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
}

}  // namespace detail

/// Gauss-Legendre rule on [-1, 1], exact for polynomials of degree 2n-1.
inline Rule gauss_legendre(std::size_t n) {
  require(n >= 1, "gauss_legendre: n >= 1");
  static std::mutex mu;
  static std::map<std::size_t, Rule> cache;
  std::lock_guard lock(mu);
  if (auto it = cache.find(n); it != cache.end()) return it->second;
  Eigen::VectorXd d = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  Eigen::VectorXd e(static_cast<Eigen::Index>(n > 1 ? n - 1 : 1));
  for (std::size_t k = 1; k < n; ++k) {
    const double kk = static_cast<double>(k);
    e(static_cast<Eigen::Index>(k - 1)) = kk / std::sqrt(4.0 * kk * kk - 1.0);
  }
  Rule r = detail::golub_welsch(d, e.head(static_cast<Eigen::Index>(n - 1)), 2.0);
  if (n > 1) detail::polish_legendre(r);
  cache.emplace(n, r);
  return r;
}

/// Gauss-Hermite rule for the weight exp(-u^2) on the real line.
inline Rule gauss_hermite(std::size_t n) {
  require(n >= 1, "gauss_hermite: n >= 1");
  static std::mutex mu;
  static std::map<std::size_t, Rule> cache;
  std::lock_guard lock(mu);
  if (auto it = cache.find(n); it != cache.end()) return it->second;
  Eigen::VectorXd d = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
  Eigen::VectorXd e(static_cast<Eigen::Index>(n > 1 ? n - 1 : 1));
  for (std::size_t k = 1; k < n; ++k) e(static_cast<Eigen::Index>(k - 1)) = std::sqrt(0.5 * static_cast<double>(k));
  Rule r = detail::golub_welsch(d, e.head(static_cast<Eigen::Index>(n - 1)), std::sqrt(std::numbers::pi));
  cache.emplace(n, r);
  return r;
}

/// Legendre rule mapped to [a, b].
inline Rule gauss_legendre(std::size_t n, double a, double b) {
  Rule r = gauss_legendre(n);
  const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  for (std::size_t i = 0; i < r.size(); ++i) {
    r.nodes[i] = mid + half * r.nodes[i];
    r.weights[i] *= half;
  }
  return r;
}

/// Composite Gauss-Legendre over [a, b] split into `panels` equal panels.
inline Rule composite_legendre(std::size_t n, std::size_t panels, double a, double b) {
  Rule out;
  const double w = (b - a) / static_cast<double>(panels);
  for (std::size_t p = 0; p < panels; ++p) {
    Rule r = gauss_legendre(n, a + w * p, a + w * (p + 1));
    out.nodes.insert(out.nodes.end(), r.nodes.begin(), r.nodes.end());
    out.weights.insert(out.weights.end(), r.weights.begin(), r.weights.end());
  }
  return out;
}

/// Visits every node of the tensor product of `rule` with itself `dim` times.
/// `f(idx)` receives the per-axis node indices.
template <class F>
void for_each_tensor_index(std::size_t n, std::size_t dim, F&& f) {
  std::vector<std::size_t> idx(dim, 0);
  if (dim == 0) {
    f(idx);
    return;
  }
  while (true) {
    f(idx);
    std::size_t k = 0;
    while (k < dim && ++idx[k] == n) idx[k++] = 0;
    if (k == dim) break;
  }
}

}  // namespace kolmo::quad
