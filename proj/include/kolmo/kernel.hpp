#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numbers>
#include <unordered_map>
#include <vector>

#include "kolmo/error.hpp"
#include "kolmo/group.hpp"
#include "kolmo/linalg.hpp"
#include "kolmo/quadrature.hpp"

namespace kolmo {

/// C(t) together with its Cholesky factor and log-determinant.
struct CovMatrix {
  double t = 0.0;
  Matrix C;
  Matrix chol;  // lower triangular, C = L L^T
  double logdet = 0.0;

  /// <C^{-1} x, x> through the Cholesky factor.
  double quad_form(const Vector& x) const {
    const Vector y = chol.triangularView<Eigen::Lower>().solve(x);
    return y.squaredNorm();
  }

  Matrix solve(const Matrix& x) const {
    const Matrix y = chol.triangularView<Eigen::Lower>().solve(x);
    return chol.transpose().triangularView<Eigen::Upper>().solve(y);
  }
};

/// C(t) = int_0^t E(s) Abar0 E(s)^T ds, factored. Throws NotSPD when t <= 0
/// or the operator is not hypoelliptic.
inline CovMatrix covariance(double t, const Group& g, const Matrix& A0) {
  if (!(t > 0.0)) fail(Errc::not_spd, "covariance requires t > 0");
  require(A0.rows() == A0.cols() && A0.rows() <= g.N(), "A0 must be square with size <= N");
  CovMatrix cov;
  cov.t = t;
  cov.C = covariance_matrix(g.B(), A0, t, g.nilpotency());
  Eigen::LLT<Matrix> llt(cov.C);
  if (llt.info() != Eigen::Success) fail(Errc::not_spd, "C(t) is not positive definite");
  cov.chol = llt.matrixL();
  cov.logdet = 0.0;
  for (Eigen::Index i = 0; i < cov.chol.rows(); ++i) {
    const double d = cov.chol(i, i);
    if (!(d > 0.0)) fail(Errc::not_spd, "C(t) is not positive definite");
    cov.logdet += 2.0 * std::log(d);
  }
  return cov;
}

/// Fundamental solution of (1/2) tr(S D^2) + <Bx, D> - d_t, i.e. the Gaussian
/// with covariance Sigma(t) = int_0^t E(s) Sbar E(s)^T ds centred at E(t) y,
/// times exp(-t tr B).
///
/// `S` is the matrix that actually enters Sigma. The named constructors fix the
/// two conventions in use: the principal part sum d^2 (S = 2I) and the
/// lambda-scaled (lambda/2) sum d^2 (S = lambda I).
///
/// Covariances are memoised per bit pattern of t in a bounded, lock-protected
/// table, so concurrent callers get identical values.
class GaussianKernel {
 public:
  GaussianKernel(Group g, Matrix S) : g_(std::move(g)), S_(std::move(S)), cache_(std::make_shared<Cache>()) {
    require(S_.rows() == S_.cols() && S_.rows() >= 1 && S_.rows() <= g_.N(), "diffusion block has wrong size");
  }

  /// Gamma_K for sum_{i<m0} d_i^2 + <Bx,D> - d_t.
  static GaussianKernel principal(Group g) {
    const int m0 = g.blocks().m0();
    return {std::move(g), 2.0 * Matrix::Identity(m0, m0)};
  }

  /// Gamma_K^lambda for (lambda/2) sum_{i<m0} d_i^2 + <Bx,D> - d_t.
  static GaussianKernel scaled(Group g, double lambda) {
    require(lambda > 0.0, "lambda must be positive");
    const int m0 = g.blocks().m0();
    return {std::move(g), lambda * Matrix::Identity(m0, m0)};
  }

  /// Frozen-coefficient kernel of div(A0 D) + <Bx,D> - d_t.
  static GaussianKernel divergence_form(Group g, const Matrix& A0) { return {std::move(g), 2.0 * A0}; }

  const Group& group() const { return g_; }
  const Matrix& diffusion() const { return S_; }

  CovMatrix sigma(double t) const {
    if (!(t > 0.0)) fail(Errc::not_spd, "covariance requires t > 0");
    const std::uint64_t key = std::bit_cast<std::uint64_t>(t);
    {
      std::lock_guard lock(cache_->mu);
      if (auto it = cache_->table.find(key); it != cache_->table.end()) return it->second;
    }
    CovMatrix cov = covariance(t, g_, S_);
    std::lock_guard lock(cache_->mu);
    if (cache_->table.size() >= kCacheCapacity) cache_->table.clear();
    cache_->table.emplace(key, cov);
    return cov;
  }

  /// Mean of the x-marginal at time t0 + tau started from y: E(tau) y.
  Vector mean(const Vector& y, double tau) const { return g_.exp_drift(tau) * y; }

  /// log Gamma(x, t; y, t0); -inf when t <= t0.
  double log_value(const Vector& x, double t, const Vector& y, double t0) const {
    const double tau = t - t0;
    if (!(tau > 0.0)) return -std::numeric_limits<double>::infinity();
    const CovMatrix cov = sigma(tau);
    const Vector d = x - g_.exp_drift(tau) * y;
    const double n = static_cast<double>(g_.N());
    return -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * cov.logdet - 0.5 * cov.quad_form(d) -
           tau * g_.trace_B();
  }

  double operator()(const Vector& x, double t, const Vector& y, double t0) const {
    if (!(t - t0 > 0.0)) return 0.0;
    return std::exp(log_value(x, t, y, t0));
  }

  /// Gamma(z, zeta) = Gamma(zeta^{-1} o z, 0).
  double operator()(const GroupPoint& z, const GroupPoint& zeta) const { return (*this)(z.x, z.t, zeta.x, zeta.t); }

 private:
  static constexpr std::size_t kCacheCapacity = 4096;
  struct Cache {
    std::mutex mu;
    std::unordered_map<std::uint64_t, CovMatrix> table;
  };

  Group g_;
  Matrix S_;
  std::shared_ptr<Cache> cache_;
};

struct KernelParams {
  double lambda = 2.0;
  Group group;
};

/// Gamma_K^lambda(z; zeta) with C(t) built from A0 = I_{m0}.
inline double gamma_K_lambda(const GroupPoint& z, const GroupPoint& zeta, const KernelParams& p) {
  return GaussianKernel::scaled(p.group, p.lambda)(z, zeta);
}

/// Density of V_t = v0 + sigma W_t, Y_t = y0 + int_0^t V ds: Gaussian with mean
/// (v0, y0 + t v0) and covariance sigma^2 [[t, t^2/2], [t^2/2, t^3/3]].
inline double prototype_density(double v, double y, double t, double v0, double y0, double sigma) {
  require(t > 0.0, "prototype_density requires t > 0");
  const double s2 = sigma * sigma;
  const double c11 = s2 * t, c12 = s2 * t * t / 2.0, c22 = s2 * t * t * t / 3.0;
  const double det = c11 * c22 - c12 * c12;
  const double dv = v - v0, dy = y - y0 - t * v0;
  const double q = (c22 * dv * dv - 2.0 * c12 * dv * dy + c11 * dy * dy) / det;
  return std::exp(-0.5 * q) / (2.0 * std::numbers::pi * std::sqrt(det));
}

/// The 1934 closed form exactly as printed (sigma absorbed). Kept only as a
/// cross-check against prototype_density; it is not a normalised density of
/// the process above for general sigma.
inline double kolmogorov_1934_printed(double v, double y, double t, double v0, double y0) {
  const double dv = v - v0;
  return std::sqrt(3.0) / (2.0 * std::numbers::pi * t * t) *
         std::exp(-dv * dv / t - 3.0 * dv * (y - y0 - t * v0) / (t * t) -
                  3.0 * (y - y0 - t * y0) * (y - y0 - t * y0) / (t * t * t));
}

struct ReproductionResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double rel_err = 0.0;
  int nodes_per_axis = 0;
};

/// Chapman-Kolmogorov check Gamma(x,t;y,t0) = int Gamma(x,t;xi,s) Gamma(xi,s;y,t0) dxi.
///
/// The integrand is a Gaussian in xi; the tensor Gauss-Hermite rule is centred
/// at its mean and scaled by its covariance. Node count doubles from
/// `start_nodes` until two consecutive estimates agree to 1e-6 (relative).
inline ReproductionResult reproduction_check(const GaussianKernel& K, const Vector& x, double t, const Vector& y,
                                             double t0, double s, int start_nodes = 4, int max_nodes = 32) {
  require(t0 < s && s < t, "reproduction_check requires t0 < s < t");
  const Group& g = K.group();
  const auto N = static_cast<Eigen::Index>(g.N());
  const CovMatrix c1 = K.sigma(s - t0);
  const CovMatrix c2 = K.sigma(t - s);
  const Matrix E = g.exp_drift(t - s);
  // Precision and mean of xi |-> Gamma(x,t;xi,s) Gamma(xi,s;y,t0) up to scale.
  const Matrix P = c1.solve(Matrix::Identity(N, N)) + E.transpose() * c2.solve(E);
  const Vector rhs_vec = c1.solve(g.exp_drift(s - t0) * y) + E.transpose() * c2.solve(x);
  Eigen::LLT<Matrix> llt(0.5 * (P + P.transpose()));
  if (llt.info() != Eigen::Success) fail(Errc::not_spd, "product precision is not positive definite");
  const Vector mu = llt.solve(rhs_vec);
  // xi = mu + L^{-T} sqrt(2) u  with P = L L^T.
  const Matrix L = llt.matrixL();
  const Matrix M = L.transpose().triangularView<Eigen::Upper>().solve(Matrix::Identity(N, N));
  const double log_det_M = -L.diagonal().array().log().sum();

  // Log of the integrand at the centre; factoring it out keeps far-tail
  // configurations representable.
  const double log_ref = K.log_value(x, t, mu, s) + K.log_value(mu, s, y, t0);
  auto estimate = [&](int n) {
    const auto rule = quad::gauss_hermite(static_cast<std::size_t>(n));
    double acc = 0.0;
    Vector u(N);
    quad::for_each_tensor_index(rule.size(), static_cast<std::size_t>(N), [&](const std::vector<std::size_t>& idx) {
      double w = 1.0, u2 = 0.0;
      for (Eigen::Index k = 0; k < N; ++k) {
        u(k) = rule.nodes[idx[static_cast<std::size_t>(k)]];
        w *= rule.weights[idx[static_cast<std::size_t>(k)]];
        u2 += u(k) * u(k);
      }
      const Vector xi = mu + std::sqrt(2.0) * (M * u);
      const double logf = K.log_value(x, t, xi, s) + K.log_value(xi, s, y, t0);
      acc += w * std::exp(logf - log_ref + u2);
    });
    // log of the integral
    return std::log(acc) + log_ref + log_det_M + 0.5 * static_cast<double>(N) * std::log(2.0);
  };

  ReproductionResult res;
  const double log_lhs = K.log_value(x, t, y, t0);
  int n = start_nodes;
  double prev = estimate(n);
  double log_rhs = prev;
  while (true) {
    const int next = 2 * n;
    const double cur = estimate(next);
    if (!std::isfinite(cur)) fail(Errc::quadrature_unconverged, "reproduction quadrature is not finite");
    if (std::abs(std::expm1(cur - prev)) <= 1e-6) {
      log_rhs = cur;
      res.nodes_per_axis = next;
      break;
    }
    if (next >= max_nodes) fail(Errc::quadrature_unconverged, "reproduction quadrature did not converge");
    n = next;
    prev = cur;
  }
  res.lhs = std::exp(log_lhs);
  res.rhs = std::exp(log_rhs);
  res.rel_err = std::abs(std::expm1(log_rhs - log_lhs));
  return res;
}

enum class EnvelopeForm { upper, lower };

/// Envelope shape shared by the Gaussian bounds, at (x,t) for pole (y,t0):
///   upper: c / tau^{Q/2} exp(-(1/c) |delta^0_{tau^{-1/2}}(y - e^{tau B} x)|^2)
///   lower: c / tau^{Q/2} exp(-c <C^{-1}(tau) w, w>),  w = y - e^{tau B} x
/// with tau = t - t0 and C built from A0 = I.
inline double gaussian_envelope(const Group& g, const Vector& x, double t, const Vector& y, double t0, double c,
                                EnvelopeForm form = EnvelopeForm::upper) {
  const double tau = t - t0;
  require(tau > 0.0, "gaussian_envelope requires t > t0");
  require(c > 0.0, "envelope constant must be positive");
  const Vector w = y - g.exp_B(tau) * x;
  const double pre = c * std::pow(tau, -0.5 * g.Q());
  if (form == EnvelopeForm::upper) {
    const double q = g.dilate_space(1.0 / std::sqrt(tau), w).squaredNorm();
    return pre * std::exp(-q / c);
  }
  const int m0 = g.blocks().m0();
  const CovMatrix cov = covariance(tau, g, Matrix::Identity(m0, m0));
  return pre * std::exp(-c * cov.quad_form(w));
}

}  // namespace kolmo
