#pragma once

#include <cmath>
#include <string>

#include "json.hpp"
#include "kolmo/error.hpp"
#include "kolmo/kernel.hpp"
#include "kolmo/mc.hpp"
#include "kolmo/quadrature.hpp"
#include "kolmo/spec.hpp"

namespace kolmo {

// Geometric-average Asian option. With x1 = log S and x2 = int_0^t log S ds,
// dx1 = mu dt + sigma dW, dx2 = x1 dt, mu = r - sigma^2 / 2, and the price
// V(x, tau) at time to maturity tau solves
//   (sigma^2 / 2) d11 V + x1 d2 V + mu d1 V - r V - d_tau V = 0,
// a Kolmogorov operator with B = [[0, 0], [1, 0]], A0 = sigma^2 / 2, b = mu,
// c = -r. The average over the whole window [0, T_avg] is exp(x2 / T_avg).

enum class Payoff { call, put, unit };

inline Payoff payoff_from_string(const std::string& s) {
  if (s == "call") return Payoff::call;
  if (s == "put") return Payoff::put;
  if (s == "unit") return Payoff::unit;
  fail(Errc::invalid_argument, "unknown payoff '" + s + "'");
}

inline const char* to_string(Payoff p) { return p == Payoff::call ? "call" : p == Payoff::put ? "put" : "unit"; }

struct AsianInputs {
  double S0 = 100.0;
  double avg = 100.0;     // geometric average over the elapsed part of the window
  double elapsed = 0.0;   // averaging time already accrued
  double r = 0.05;
  double sigma = 0.2;
  double maturity = 1.0;  // remaining time
  double strike = 100.0;
  Payoff payoff = Payoff::call;
  std::size_t paths = 1000000;
  double dt = 1e-2;
  std::uint64_t seed = 1;
  int threads = 0;

  double window() const { return elapsed + maturity; }
  double mu() const { return r - 0.5 * sigma * sigma; }
  Vector x0() const {
    Vector x(2);
    x << std::log(S0), elapsed > 0.0 ? elapsed * std::log(avg) : 0.0;
    return x;
  }
  double payoff_of(double x2) const {
    const double A = std::exp(x2 / window());
    switch (payoff) {
      case Payoff::call: return std::max(A - strike, 0.0);
      case Payoff::put: return std::max(strike - A, 0.0);
      case Payoff::unit: return 1.0;
    }
    return 0.0;
  }
  void validate() const {
    require(S0 > 0.0 && sigma > 0.0 && maturity > 0.0 && strike > 0.0, "S0, sigma, maturity and strike must be positive");
    require(r >= 0.0 && elapsed >= 0.0, "r and elapsed must be non-negative");
    if (elapsed > 0.0) require(avg > 0.0, "the running average must be positive");
  }
  json to_json() const {
    return {{"S0", S0},       {"avg", avg},         {"elapsed", elapsed}, {"r", r},         {"sigma", sigma},
            {"maturity", maturity}, {"strike", strike}, {"payoff", to_string(payoff)}, {"paths", paths}, {"dt", dt},
            {"seed", seed}};
  }
};

/// Backward pricing operator in the variables (log S, int log S).
inline OperatorSpec asian_pricing_spec(const AsianInputs& in) {
  OperatorSpec s = OperatorSpec::constant(Group::prototype().B(), {1, 1}, Matrix::Constant(1, 1, 0.5 * in.sigma * in.sigma),
                                          {0.0, in.maturity});
  s.coeffs.b = constant_vector(Vector::Constant(1, in.mu()));
  s.coeffs.c = constant_scalar(-in.r);
  return s;
}

/// Forward operator of the state process, for simulation: the linear drift
/// -B x = (0, x1) gives B = [[0, 0], [-1, 0]]; a = mu is the transport drift and
/// c = -r makes the path weights the discount factor.
inline OperatorSpec asian_process_spec(const AsianInputs& in) {
  Matrix B(2, 2);
  B << 0, 0, -1, 0;
  OperatorSpec s = OperatorSpec::constant(B, {1, 1}, Matrix::Constant(1, 1, 0.5 * in.sigma * in.sigma), {0.0, in.maturity});
  s.coeffs.a = constant_vector(Vector::Constant(1, in.mu()));
  s.coeffs.c = constant_scalar(-in.r);
  return s;
}

struct QuadraturePrice {
  double price = 0.0;
  double tol = 0.0;  // difference between the last two refinements
  int panels = 0;
};

/// e^{-rT} int payoff(xi) Gamma_K^{sigma^2}(x + E(T) beta, T; xi, 0) dxi, where
/// beta = (mu T, mu T^2 / 2) is the shift produced by the constant drift b.
/// Composite Gauss-Legendre over +-10 standard deviations, split at the
/// payoff kink, doubling the panels until two passes agree to 1e-10.
inline QuadraturePrice asian_price_quadrature(const AsianInputs& in) {
  in.validate();
  const Group g = Group::prototype();
  const auto K = GaussianKernel::scaled(g, in.sigma * in.sigma);
  const double T = in.maturity, mu = in.mu();
  const Vector x = in.x0();
  Vector beta(2);
  beta << mu * T, 0.5 * mu * T * T;
  const Vector xs = x + g.exp_drift(T) * beta;
  // Law of xi: mean e^{TB} x + beta, covariance e^{TB} Sigma(T) e^{TB}^T.
  const Matrix M = g.exp_B(T);
  const Vector m = M * x + beta;
  const Matrix C = M * K.sigma(T).C * M.transpose();
  const double s1 = std::sqrt(C(0, 0)), s2 = std::sqrt(C(1, 1));
  const double a1 = m(0) - 10 * s1, b1 = m(0) + 10 * s1;
  double a2 = m(1) - 10 * s2, b2 = m(1) + 10 * s2;
  const double kink = in.window() * std::log(in.strike);

  auto integrate = [&](int panels) {
    const auto r1 = quad::composite_legendre(8, static_cast<std::size_t>(panels), a1, b1);
    auto piece = [&](double lo, double hi) {
      if (!(hi > lo)) return 0.0;
      const auto r2 = quad::composite_legendre(8, static_cast<std::size_t>(panels), lo, hi);
      double acc = 0.0;
      Vector xi(2);
      for (std::size_t j = 0; j < r2.size(); ++j) {
        const double p = in.payoff_of(r2.nodes[j]);
        if (p == 0.0) continue;
        double inner = 0.0;
        for (std::size_t i = 0; i < r1.size(); ++i) {
          xi << r1.nodes[i], r2.nodes[j];
          inner += r1.weights[i] * K(xs, T, xi, 0.0);
        }
        acc += r2.weights[j] * p * inner;
      }
      return acc;
    };
    double total;
    if (in.payoff != Payoff::unit && kink > a2 && kink < b2)
      total = piece(a2, kink) + piece(kink, b2);
    else
      total = piece(a2, b2);
    return std::exp(-in.r * T) * total;
  };

  QuadraturePrice q;
  double prev = integrate(4);
  for (int panels = 8; panels <= 256; panels *= 2) {
    const double cur = integrate(panels);
    q.tol = std::abs(cur - prev);
    q.price = cur;
    q.panels = panels;
    if (q.tol <= 1e-10 * std::max(1.0, std::abs(cur))) return q;
    prev = cur;
  }
  fail(Errc::quadrature_unconverged, "Asian quadrature did not converge");
}

struct McPrice {
  double price = 0.0;
  double se = 0.0;
};

/// Mean of w * payoff(X_T) over simulated paths of the state process; the
/// weights carry the discount factor.
inline McPrice asian_price_mc(const AsianInputs& in) {
  in.validate();
  McConfig c;
  c.paths = in.paths;
  c.dt = in.dt;
  c.seed = in.seed;
  c.threads = in.threads;
  const auto e = simulate(asian_process_spec(in), in.x0(), 0.0, in.maturity, c);
  double s = 0.0, s2 = 0.0;
  for (std::size_t p = 0; p < e.paths; ++p) {
    const double v = e.weights[0][p] * in.payoff_of(e.states[0][2 * p + 1]);
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(e.paths);
  McPrice out;
  out.price = s / n;
  out.se = std::sqrt(std::max(0.0, s2 / n - out.price * out.price) / n);
  return out;
}

struct AsianReport {
  AsianInputs inputs;
  QuadraturePrice quadrature;
  McPrice mc;
  double gap = 0.0;
  double budget = 0.0;  // 3 SE + quadrature tolerance

  json to_json() const {
    return {{"inputs", inputs.to_json()},
            {"quadrature", {{"price", quadrature.price}, {"tol", quadrature.tol}, {"panels", quadrature.panels}}},
            {"mc", {{"price", mc.price}, {"se", mc.se}}},
            {"gap", gap},
            {"budget", budget},
            {"derivation",
             {"x1 = log S, x2 = int_0^t log S ds; geometric average A = exp(x2 / (elapsed + maturity))",
              "dx1 = (r - sigma^2/2) dt + sigma dW, dx2 = x1 dt",
              "pricing operator: (sigma^2/2) d11 + x1 d2 + (r - sigma^2/2) d1 - r - d_tau, i.e. B = [[0,0],[1,0]], "
              "A0 = sigma^2/2, b = r - sigma^2/2, c = -r",
              "(i) e^{-rT} int payoff(xi) Gamma_K^{sigma^2}(x + E(T) beta, T; xi, 0) dxi, beta = (mu T, mu T^2/2)",
              "(ii) exponential-Euler paths of (x1, x2) with weights exp(-r T)"}}};
  }
};

/// Prices by both methods; Inconsistent if they disagree beyond 3 SE plus the
/// quadrature tolerance.
inline AsianReport price_asian(const AsianInputs& in) {
  AsianReport rep;
  rep.inputs = in;
  rep.quadrature = asian_price_quadrature(in);
  rep.mc = asian_price_mc(in);
  rep.gap = std::abs(rep.quadrature.price - rep.mc.price);
  rep.budget = 3.0 * rep.mc.se + rep.quadrature.tol;
  if (rep.gap > rep.budget)
    fail(Errc::inconsistent, "quadrature and Monte-Carlo prices differ by " + std::to_string(rep.gap) +
                                 ", beyond the budget " + std::to_string(rep.budget));
  return rep;
}

}  // namespace kolmo
