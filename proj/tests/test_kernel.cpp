#include <numbers>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "kolmo/kernel.hpp"

using namespace kolmo;

namespace {

// Closed-form Gaussian for the prototype with covariance lambda * C(t),
// C(t) = [[t, -t^2/2], [-t^2/2, t^3/3]], det C = t^4/12. Independent of the
// library's quadrature and Cholesky path.
double prototype_oracle(double lambda, double x1, double x2, double t) {
  const double c11 = lambda * t, c12 = -lambda * t * t / 2, c22 = lambda * t * t * t / 3;
  const double det = c11 * c22 - c12 * c12;
  const double q = (c22 * x1 * x1 - 2 * c12 * x1 * x2 + c11 * x2 * x2) / det;
  return std::exp(-0.5 * q) / (2 * std::numbers::pi * std::sqrt(det));
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(Kernel, PrototypeCovariance) {
  const Group g = Group::prototype();
  for (double t : {1e-3, 1e-2, 0.1, 0.5, 1.0, 3.0}) {
    const auto cov = covariance(t, g, Matrix::Identity(1, 1));
    EXPECT_NEAR(cov.C(0, 0), t, 1e-15 * t);
    EXPECT_NEAR(cov.C(0, 1), -t * t / 2, 1e-15 * t * t);
    EXPECT_NEAR(cov.C(1, 1), t * t * t / 3, 1e-15 * t * t * t);
    EXPECT_NEAR(cov.logdet, std::log(std::pow(t, 4) / 12), 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov.C);
    EXPECT_GT(es.eigenvalues()(0), 0.0);
  }
}

TEST(Kernel, HeatCovariance) {
  const Group g(Matrix::Zero(3, 3), BlockStructure::from_blocks({3}));
  const auto cov = covariance(0.7, g, Matrix::Identity(3, 3));
  EXPECT_LT((cov.C - 0.7 * Matrix::Identity(3, 3)).norm(), 1e-15);
  EXPECT_NEAR(cov.logdet, 3 * std::log(0.7), 1e-14);
}

TEST(Kernel, NonPositiveTimeIsNotSpd) {
  const Group g = Group::prototype();
  try {
    covariance(0.0, g, Matrix::Identity(1, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::not_spd);
  }
  const Group degenerate(Matrix::Zero(2, 2), BlockStructure::from_blocks({1, 1}));
  EXPECT_THROW(covariance(1.0, degenerate, Matrix::Identity(1, 1)), Error);
}

TEST(Kernel, MatchesClosedFormPrototype) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-2.0, 2.0), T(0.05, 2.0), S(0.2, 2.0);
  const Group g = Group::prototype();
  for (int k = 0; k < 2000; ++k) {
    const double sigma = S(rng), lambda = sigma * sigma;
    // Points within a few standard deviations so neither side underflows.
    const GroupPoint zeta(vec({U(rng), U(rng)}), U(rng) * 0.01);
    const double tau = T(rng), sd = sigma * std::sqrt(tau);
    const Vector off = vec({2 * U(rng) * sd, 2 * U(rng) * sd * tau});
    const GroupPoint z(g.exp_drift(tau) * zeta.x + off, zeta.t + tau);
    const double value = gamma_K_lambda(z, zeta, {lambda, g});
    const auto rel = g.compose(g.inverse(zeta), z);
    const double ref = prototype_oracle(lambda, rel.x(0), rel.x(1), rel.t);
    EXPECT_LT(std::abs(value - ref) / ref, 1e-10);
  }
}

TEST(Kernel, VanishesInThePast) {
  const auto K = GaussianKernel::principal(Group::prototype());
  EXPECT_EQ(K(vec({0.1, 0.2}), 0.5, vec({0.0, 0.0}), 0.5), 0.0);
  EXPECT_EQ(K(vec({0.1, 0.2}), 0.4, vec({0.0, 0.0}), 0.5), 0.0);
  EXPECT_EQ(gamma_K_lambda({vec({0, 0}), -1.0}, GroupPoint::zero(2), {2.0, Group::prototype()}), 0.0);
}

TEST(Kernel, LambdaTwoIsPrincipalKernel) {
  const Group g = Group::prototype();
  const auto K = GaussianKernel::principal(g);
  const double t = 0.8;
  const Vector x = vec({0.3, -0.4});
  const auto cov = covariance(t, g, Matrix::Identity(1, 1));
  const double expected = std::pow(4 * std::numbers::pi, -1.0) / std::sqrt(std::exp(cov.logdet)) *
                          std::exp(-0.25 * cov.quad_form(x));
  EXPECT_NEAR(K(x, t, Vector::Zero(2), 0.0) / expected, 1.0, 1e-13);
  EXPECT_NEAR(gamma_K_lambda({x, t}, GroupPoint::zero(2), {2.0, g}) / expected, 1.0, 1e-13);
  // Value at the pole's time-one image.
  EXPECT_NEAR(K(Vector::Zero(2), 1.0, Vector::Zero(2), 0.0), 1.0 / (4 * std::numbers::pi) * std::sqrt(12.0), 1e-14);
}

TEST(Kernel, Homogeneity) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(-1.5, 1.5), T(0.05, 2.0), R(0.5, 2.0);
  const Group g = Group::prototype();
  const auto K = GaussianKernel::principal(g);
  const auto zero = GroupPoint::zero(2);
  for (int k = 0; k < 2000; ++k) {
    const double t = T(rng);
    const GroupPoint z(g.dilate_space(std::sqrt(t), vec({U(rng), U(rng)})), t);
    const double r = R(rng);
    const double lhs = K(g.dilate(r, z), zero), rhs = std::pow(r, -g.Q()) * K(z, zero);
    EXPECT_LT(std::abs(lhs - rhs) / rhs, 1e-10);
  }
}

TEST(Kernel, TranslationInvariance) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  Matrix B = Matrix::Zero(3, 3);
  B(2, 0) = 1.0;
  B(2, 1) = -0.5;
  const Group g = Group::canonical(B, {2, 1});
  const auto K = GaussianKernel::principal(g);
  for (int k = 0; k < 500; ++k) {
    const GroupPoint z(vec({U(rng), U(rng), U(rng)}), 1.0 + U(rng) * 0.5);
    const GroupPoint w(vec({U(rng), U(rng), U(rng)}), U(rng) * 0.2);
    const GroupPoint s(vec({U(rng), U(rng), U(rng)}), U(rng));
    const double a = K(g.compose(s, z), g.compose(s, w)), b = K(z, w);
    EXPECT_LT(std::abs(a - b) / b, 1e-10);
  }
}

TEST(Kernel, IntegratesToOne) {
  // Gauss-Hermite over x with the kernel's own mean and covariance.
  for (double lambda : {0.5, 2.0}) {
    Matrix B = Matrix::Zero(3, 3);
    B(1, 0) = 1.0;
    B(2, 1) = 2.0;
    const Group g = Group::canonical(B, {1, 1, 1});
    const auto K = GaussianKernel::scaled(g, lambda);
    const Vector y = vec({0.2, -0.1, 0.3});
    const double tau = 0.6;
    const auto cov = K.sigma(tau);
    const Vector mu = K.mean(y, tau);
    const auto rule = quad::gauss_hermite(12);
    double acc = 0.0;
    quad::for_each_tensor_index(rule.size(), 3, [&](const std::vector<std::size_t>& idx) {
      Vector u(3);
      double w = 1.0;
      for (int i = 0; i < 3; ++i) {
        u(i) = rule.nodes[idx[i]];
        w *= rule.weights[idx[i]];
      }
      const Vector x = mu + std::sqrt(2.0) * cov.chol * u;
      acc += w * std::exp(u.squaredNorm()) * K(x, tau, y, 0.0);
    });
    acc *= std::pow(2.0, 1.5) * std::exp(0.5 * cov.logdet);
    EXPECT_NEAR(acc, 1.0, 1e-8);
  }
}

TEST(Kernel, ReproductionPrototype) {
  const auto K = GaussianKernel::principal(Group::prototype());
  const auto res = reproduction_check(K, vec({0, 0}), 1.0, vec({0, 0}), 0.0, 0.5);
  EXPECT_LT(res.rel_err, 1e-8);
  std::vector<double> errs;
  for (double s : {0.25, 0.5, 0.75}) {
    const auto r = reproduction_check(K, vec({0.4, -0.2}), 1.0, vec({0.1, 0.3}), 0.0, s);
    EXPECT_LT(r.rel_err, 1e-8);
  }
}

TEST(Kernel, ReproductionHeat) {
  const Group g(Matrix::Zero(1, 1), BlockStructure::from_blocks({1}));
  const auto K = GaussianKernel::principal(g);
  const auto res = reproduction_check(K, vec({0.7}), 1.3, vec({-0.2}), 0.1, 0.6);
  EXPECT_LT(res.rel_err, 1e-12);
}

TEST(Kernel, ReproductionRandomPrototype) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> U(-1.0, 1.0), V(0.0, 1.0);
  const auto K = GaussianKernel::principal(Group::prototype());
  for (int k = 0; k < 100; ++k) {
    const double t0 = U(rng), t = t0 + 0.1 + 2.0 * V(rng);
    const double s = t0 + (0.1 + 0.8 * V(rng)) * (t - t0);
    const auto r = reproduction_check(K, vec({U(rng), U(rng)}), t, vec({U(rng), U(rng)}), t0, s);
    EXPECT_LT(r.rel_err, 1e-8);
  }
}

TEST(Kernel, PrototypeDensityMoments) {
  // Moments by Gauss-Hermite against the hand-derived mean and covariance.
  const double v0 = 0.3, y0 = -0.2, sigma = 0.8, t = 0.9;
  const auto rule = quad::gauss_hermite(8);
  // Hand Cholesky of sigma^2 [[t, t^2/2], [t^2/2, t^3/3]] maps the density to exp(-|u|^2).
  const double mv = v0, my = y0 + t * v0;
  const double l11 = sigma * std::sqrt(t), l21 = sigma * std::pow(t, 1.5) / 2,
               l22 = sigma * std::pow(t, 1.5) / std::sqrt(12.0);
  double m0 = 0, m1v = 0, m1y = 0, cvv = 0, cvy = 0, cyy = 0;
  for (std::size_t i = 0; i < rule.size(); ++i)
    for (std::size_t j = 0; j < rule.size(); ++j) {
      const double u1 = rule.nodes[i], u2 = rule.nodes[j];
      const double v = mv + std::sqrt(2.0) * l11 * u1, y = my + std::sqrt(2.0) * (l21 * u1 + l22 * u2);
      const double w = rule.weights[i] * rule.weights[j] * 2.0 * l11 * l22 * std::exp(u1 * u1 + u2 * u2);
      const double p = w * prototype_density(v, y, t, v0, y0, sigma);
      m0 += p;
      m1v += p * v;
      m1y += p * y;
      cvv += p * (v - mv) * (v - mv);
      cvy += p * (v - mv) * (y - my);
      cyy += p * (y - my) * (y - my);
    }
  const double s2 = sigma * sigma;
  EXPECT_NEAR(m0, 1.0, 1e-8);
  EXPECT_NEAR(m1v, mv, 1e-8);
  EXPECT_NEAR(m1y, my, 1e-8);
  EXPECT_NEAR(cvv, s2 * t, 1e-8);
  EXPECT_NEAR(cvy, s2 * t * t / 2, 1e-8);
  EXPECT_NEAR(cyy, s2 * t * t * t / 3, 1e-8);
}

TEST(Kernel, PrototypeDensityIsReflectedKernel) {
  // V, Y = y0 + int V runs along +v in y; the prototype kernel's drift runs
  // along -x1. Reflecting y maps one onto the other.
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> U(-1.0, 1.0), T(0.1, 2.0), S(0.3, 1.5);
  const Group g = Group::prototype();
  for (int k = 0; k < 1000; ++k) {
    const double v0 = U(rng), y0 = U(rng), t = T(rng), sigma = S(rng);
    const double v = v0 + 2 * U(rng) * sigma * std::sqrt(t), y = y0 + t * v0 + 2 * U(rng) * sigma * std::pow(t, 1.5);
    const auto K = GaussianKernel::scaled(g, sigma * sigma);
    const double a = prototype_density(v, y, t, v0, y0, sigma);
    const double b = K(vec({v, -y}), t, vec({v0, -y0}), 0.0);
    EXPECT_LT(std::abs(a - b) / a, 1e-10);
  }
}

TEST(Kernel, PrintedFormulaDiscrepancy) {
  // The printed density equals the sigma^2 = 2 density with the cross term of
  // the other drift orientation; with v0 = y0 = 0 the typo in the last square
  // is invisible and the two agree.
  const Group g = Group::prototype();
  const auto K = GaussianKernel::principal(g);
  for (double v : {-0.5, 0.2, 1.0})
    for (double y : {-0.3, 0.4}) {
      const double printed = kolmogorov_1934_printed(v, y, 0.7, 0.0, 0.0);
      EXPECT_NEAR(printed / K(vec({v, y}), 0.7, vec({0, 0}), 0.0), 1.0, 1e-12);
    }
  // With y0 != 0 it is not the density of the stated process.
  const double printed = kolmogorov_1934_printed(0.1, 0.3, 0.7, 0.2, 0.5);
  const double truth = prototype_density(0.1, 0.3, 0.7, 0.2, 0.5, std::sqrt(2.0));
  RecordProperty("printed_vs_truth", std::to_string(printed / truth));
  EXPECT_GT(std::abs(printed / truth - 1.0), 1e-3);
}

TEST(Kernel, EnvelopeProperties) {
  const Group heat(Matrix::Zero(2, 2), BlockStructure::from_blocks({2}));
  EXPECT_NEAR(gaussian_envelope(heat, vec({0.3, 0.1}), 1.0, vec({0.3, 0.1}), 0.0, 2.5), 2.5, 1e-15);

  const Group g = Group::prototype();
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> U(-1.0, 1.0), R(0.5, 2.0);
  for (auto form : {EnvelopeForm::upper, EnvelopeForm::lower}) {
    for (int k = 0; k < 200; ++k) {
      const GroupPoint z(vec({U(rng), U(rng)}), 1.0 + 0.5 * U(rng));
      const GroupPoint zeta(vec({U(rng), U(rng)}), 0.2 * U(rng));
      const double r = R(rng);
      const auto dz = g.dilate(r, z), dzeta = g.dilate(r, zeta);
      const double a = gaussian_envelope(g, dz.x, dz.t, dzeta.x, dzeta.t, 1.7, form);
      const double b = std::pow(r, -g.Q()) * gaussian_envelope(g, z.x, z.t, zeta.x, zeta.t, 1.7, form);
      EXPECT_LT(std::abs(a - b) / b, 1e-10);
    }
    // Monotone in the displacement.
    double prev = std::numeric_limits<double>::infinity();
    for (double d : {0.0, 0.1, 0.5, 1.0, 2.0}) {
      const double v = gaussian_envelope(g, vec({0, 0}), 1.0, vec({d, 0}), 0.0, 1.5, form);
      EXPECT_LT(v, prev);
      prev = v;
    }
  }
}

TEST(Kernel, CacheIsConsistentAcrossThreads) {
  const auto K = GaussianKernel::principal(Group::prototype());
  std::vector<double> a(64), b(64);
  auto run = [&](std::vector<double>& out) {
    for (int i = 0; i < 64; ++i) out[i] = K(vec({0.1, 0.2}), 0.01 * (i + 1), vec({0, 0}), 0.0);
  };
  std::thread t1(run, std::ref(a)), t2(run, std::ref(b));
  t1.join();
  t2.join();
  for (int i = 0; i < 64; ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
}
