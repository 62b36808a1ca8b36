#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "kolmo/error.hpp"
#include "kolmo/linalg.hpp"
#include "kolmo/structure.hpp"

namespace kolmo {

/// z = (x, t) in R^{N+1}.
struct GroupPoint {
  Vector x;
  double t = 0.0;

  GroupPoint() = default;
  GroupPoint(Vector x_, double t_) : x(std::move(x_)), t(t_) {}

  static GroupPoint zero(Eigen::Index N) { return {Vector::Zero(N), 0.0}; }
  Eigen::Index dim() const { return x.size(); }
};

/// r^k by repeated squaring; keeps dilations exact for integer exponents.
inline double ipow(double r, int k) {
  if (k < 0) return 1.0 / ipow(r, -k);
  double out = 1.0, base = r;
  while (k) {
    if (k & 1) out *= base;
    base *= base;
    k >>= 1;
  }
  return out;
}

/// Q_r(z0) = z0 o delta_r(Q_1), Q_1 the unit past cylinder.
struct Cylinder {
  GroupPoint center;
  double radius = 1.0;
};

/// P_{beta,r,R}(z0) = z0 o { delta_rho(xi, beta) : |xi| < r, 0 < rho <= R }.
struct Cone {
  GroupPoint vertex;
  double beta = 1.0;
  double r = 1.0;
  double R = 1.0;
};

/// The translation group (R^{N+1}, o) attached to a constant drift matrix B,
/// with the dilations of a block structure. Immutable; safe to share.
class Group {
 public:
  Group(Matrix B, BlockStructure blocks)
      : B_(std::move(B)), bs_(std::move(blocks)), nil_(nilpotency_index(B_)) {
    require(B_.rows() == bs_.N && B_.cols() == bs_.N, "B dimension must match blocks");
  }

  /// Validates canonical form before building the group.
  static Group canonical(const Matrix& B, std::vector<int> blocks) {
    return Group(B, detect_canonical_form(B, std::move(blocks)));
  }

  /// The prototype kinetic group: B = [[0,0],[1,0]], blocks [1,1].
  static Group prototype() {
    Matrix B(2, 2);
    B << 0, 0, 1, 0;
    return canonical(B, {1, 1});
  }

  const Matrix& B() const { return B_; }
  const BlockStructure& blocks() const { return bs_; }
  int N() const { return bs_.N; }
  int Q() const { return bs_.Q; }
  int nilpotency() const { return nil_; }
  double trace_B() const { return B_.trace(); }

  /// E(s) = exp(-sB).
  Matrix exp_drift(double s) const { return exp_minus(B_, s, nil_); }

  /// exp(sB) = E(-s).
  Matrix exp_B(double s) const { return exp_minus(B_, -s, nil_); }

  /// (x,t) o (xi,tau) = (xi + E(tau) x, t + tau).
  GroupPoint compose(const GroupPoint& z, const GroupPoint& w) const {
    return {w.x + exp_drift(w.t) * z.x, z.t + w.t};
  }

  /// (x,t)^{-1} = (-E(-t) x, -t).
  GroupPoint inverse(const GroupPoint& z) const { return {-(exp_drift(-z.t) * z.x), -z.t}; }

  GroupPoint dilate(double r, const GroupPoint& z) const {
    require(r > 0.0, "dilation factor must be positive");
    GroupPoint out = z;
    for (int i = 0; i < bs_.N; ++i) out.x(i) *= ipow(r, bs_.alpha[static_cast<std::size_t>(i)]);
    out.t *= r * r;
    return out;
  }

  /// Spatial part delta^0_r only.
  Vector dilate_space(double r, const Vector& x) const {
    Vector out = x;
    for (int i = 0; i < bs_.N; ++i) out(i) *= ipow(r, bs_.alpha[static_cast<std::size_t>(i)]);
    return out;
  }

  /// The unique r > 0 with sum x_i^2 / r^{2 alpha_i} + t^2 / r^4 = 1.
  double hom_norm(const GroupPoint& z) const {
    double M = std::sqrt(std::abs(z.t));
    bool nonzero = z.t != 0.0;
    for (int i = 0; i < bs_.N; ++i) {
      const double xi = std::abs(z.x(i));
      if (xi == 0.0) continue;
      nonzero = true;
      M = std::max(M, std::pow(xi, 1.0 / bs_.alpha[static_cast<std::size_t>(i)]));
    }
    if (!nonzero) return 0.0;
    // F(r) - 1 is strictly decreasing; F(M) >= 1 and F(M (N+1)) < 1.
    auto residual = [&](double r) {
      double s = z.t * z.t / (r * r * r * r);
      for (int i = 0; i < bs_.N; ++i) {
        const double q = z.x(i) / ipow(r, bs_.alpha[static_cast<std::size_t>(i)]);
        s += q * q;
      }
      return s - 1.0;
    };
    double lo = M, hi = M * (bs_.N + 1);
    while (hi - lo > 1e-6 * hi) {
      const double mid = 0.5 * (lo + hi);
      (residual(mid) > 0.0 ? lo : hi) = mid;
    }
    // Newton polish in log r: G(s) = F(e^s) - 1, G'(s) = -sum 2 alpha_i q_i^2 - 4 q_t^2.
    double r = 0.5 * (lo + hi);
    for (int it = 0; it < 8; ++it) {
      double F = 0.0, dF = 0.0;
      const double qt = z.t / (r * r);
      F += qt * qt;
      dF -= 4.0 * qt * qt;
      for (int i = 0; i < bs_.N; ++i) {
        const int a = bs_.alpha[static_cast<std::size_t>(i)];
        const double q = z.x(i) / ipow(r, a);
        F += q * q;
        dF -= 2.0 * a * q * q;
      }
      const double step = (F - 1.0) / dF;
      r *= std::exp(-step);
      if (std::abs(step) < 1e-16) break;
    }
    return r;
  }

  /// z^{-1} o w = (xi - E(tau - t) x, tau - t), evaluated without forming the
  /// inverse so that z^{-1} o z is exactly zero.
  GroupPoint relative(const GroupPoint& z, const GroupPoint& w) const {
    const double dt = w.t - z.t;
    return {w.x - exp_drift(dt) * z.x, dt};
  }

  /// d(z, w) = |z^{-1} o w|.
  double distance(const GroupPoint& z, const GroupPoint& w) const { return hom_norm(relative(z, w)); }

  /// zeta = delta_{1/r}(z0^{-1} o z) must satisfy |zeta^(j)| < 1 for every block
  /// and zeta_t in (-1, 0).
  bool cylinder_contains(const Cylinder& c, const GroupPoint& z) const {
    require(c.radius > 0.0, "cylinder radius must be positive");
    const GroupPoint zeta = dilate(1.0 / c.radius, relative(c.center, z));
    if (!(zeta.t > -1.0 && zeta.t < 0.0)) return false;
    for (std::size_t j = 0; j < bs_.blocks.size(); ++j) {
      const int off = bs_.offset(static_cast<int>(j));
      if (zeta.x.segment(off, bs_.blocks[j]).norm() >= 1.0) return false;
    }
    return true;
  }

  bool cone_contains(const Cone& p, const GroupPoint& z) const {
    require(p.beta > 0.0 && p.r > 0.0 && p.R > 0.0, "cone parameters must be positive");
    const GroupPoint zeta = relative(p.vertex, z);
    if (!(zeta.t > 0.0)) return false;
    const double rho = std::sqrt(zeta.t / p.beta);
    if (!(rho > 0.0 && rho <= p.R)) return false;
    return dilate_space(1.0 / rho, zeta.x).norm() < p.r;
  }

 private:
  Matrix B_;
  BlockStructure bs_;
  int nil_;
};

}  // namespace kolmo
