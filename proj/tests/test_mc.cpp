#include <cmath>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "kolmo/mc.hpp"

using namespace kolmo;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x(i++) = d;
  return x;
}

// Law of (V, Y) for dV = sqrt(2) dW, dY = -V dt started at (v0, y0):
// mean (v0, y0 - t v0), covariance 2 [[t, -t^2/2], [-t^2/2, t^3/3]].
Vector prototype_mean(const Vector& x0, double t) { return vec({x0(0), x0(1) - t * x0(0)}); }
Matrix prototype_cov(double t) {
  Matrix C(2, 2);
  C << t, -t * t / 2, -t * t / 2, t * t * t / 3;
  return 2.0 * C;
}

double prototype_pdf(double v, double y, const Vector& x0, double t) {
  const Vector m = prototype_mean(x0, t);
  const Matrix C = prototype_cov(t);
  const double det = C(0, 0) * C(1, 1) - C(0, 1) * C(1, 0);
  const double dv = v - m(0), dy = y - m(1);
  const double q = (C(1, 1) * dv * dv - 2 * C(0, 1) * dv * dy + C(0, 0) * dy * dy) / det;
  return std::exp(-0.5 * q) / (2 * std::numbers::pi * std::sqrt(det));
}

McConfig config(std::size_t paths, double dt, std::uint64_t seed) {
  McConfig c;
  c.paths = paths;
  c.dt = dt;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Simulate, DriftSignCalibration) {
  // Only one sign reproduces the kernel's centre E(t) x0.
  const auto spec = OperatorSpec::prototype();
  const Vector x0 = vec({1.5, -0.5});
  const auto K = GaussianKernel::principal(spec.group());
  const Vector target = K.mean(x0, 1.0);
  EXPECT_NEAR(target(1), prototype_mean(x0, 1.0)(1), 1e-14);
  for (double sign : {-1.0, 1.0}) {
    McConfig c = config(20000, 0.01, 11);
    c.drift_sign = sign;
    const auto m = moments(simulate(spec, x0, 0.0, 1.0, c), 0);
    const double z = std::abs(m.mean(1) - target(1)) / m.mean_se(1);
    if (sign == kDriftSign)
      EXPECT_LT(z, 4.0);
    else
      EXPECT_GT(z, 20.0);
  }
}

TEST(Simulate, NoiseFreeFlowIsTheExactDrift) {
  auto spec = OperatorSpec::prototype();
  spec.coeffs.A0 = constant_matrix(Matrix::Zero(1, 1));
  const Vector x0 = vec({0.7, 0.2});
  const auto e = simulate(spec, x0, 0.25, 1.5, config(4, 0.01, 0));
  const Vector want = spec.group().exp_drift(1.25) * x0;
  for (std::size_t p = 0; p < 4; ++p) EXPECT_LT((e.state(0, p) - want).norm(), 1e-10);
  EXPECT_EQ(e.weights[0][0], 1.0);
}

TEST(Simulate, MeanAndCovarianceMatchTheKernel) {
  const auto spec = OperatorSpec::prototype();
  const Vector x0 = vec({0.3, -0.2});
  McConfig c = config(200000, 0.02, 42);
  c.save_times = {0.5};
  const auto e = simulate(spec, x0, 0.0, 1.0, c);
  ASSERT_EQ(e.times.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    const double t = e.times[k];
    const auto m = moments(e, k);
    const Vector mu = prototype_mean(x0, t);
    const Matrix C = prototype_cov(t);
    for (int i = 0; i < 2; ++i) EXPECT_LT(std::abs(m.mean(i) - mu(i)), 3 * m.mean_se(i)) << "t=" << t << " i=" << i;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) EXPECT_LT(std::abs(m.cov(i, j) - C(i, j)), 3 * m.cov_se(i, j)) << "t=" << t;
  }
}

TEST(Simulate, EulerMaruyamaIsWeakOrderOne) {
  // The plain scheme under-estimates Var(Y_1) by about dt.
  const auto spec = OperatorSpec::prototype();
  std::vector<double> bias;
  for (double dt : {0.2, 0.1, 0.05}) {
    McConfig c = config(100000, dt, 5);
    c.scheme = Scheme::euler_maruyama;
    const auto m = moments(simulate(spec, Vector::Zero(2), 0.0, 1.0, c), 0);
    bias.push_back(std::abs(m.cov(1, 1) - prototype_cov(1.0)(1, 1)));
  }
  EXPECT_NEAR(std::log2(bias[0] / bias[1]), 1.0, 0.25);
  EXPECT_NEAR(std::log2(bias[1] / bias[2]), 1.0, 0.25);
}

TEST(Simulate, FeynmanKacWeights) {
  auto spec = OperatorSpec::prototype();
  spec.coeffs.c = constant_scalar(-0.5);
  const auto e = simulate(spec, Vector::Zero(2), 0.0, 1.0, [] {
    McConfig c = config(16, 0.1, 3);
    c.save_times = {0.5};
    return c;
  }());
  EXPECT_NEAR(e.weights[0][3], std::exp(-0.25), 1e-14);
  EXPECT_NEAR(e.weights[1][7], std::exp(-0.5), 1e-14);
  EXPECT_NEAR(fit_mass_decay(e), 0.5, 1e-12);
}

TEST(Simulate, ReproducibleAndThreadIndependent) {
  const auto spec = OperatorSpec::prototype();
  McConfig a = config(50000, 0.05, 9);
  a.chunk_size = 4096;
  a.threads = 1;
  McConfig b = a;
  b.threads = 4;
  const auto ea = simulate(spec, vec({0.1, 0.2}), 0.0, 1.0, a);
  const auto eb = simulate(spec, vec({0.1, 0.2}), 0.0, 1.0, b);
  EXPECT_EQ(ea.states, eb.states);
  EXPECT_EQ(ea.metadata().dump(), eb.metadata().dump());

  // The first chunk is its own substream: a shorter run reproduces its prefix.
  McConfig c = a;
  c.paths = 4096;
  const auto ec = simulate(spec, vec({0.1, 0.2}), 0.0, 1.0, c);
  EXPECT_TRUE(std::equal(ec.states[0].begin(), ec.states[0].end(), ea.states[0].begin()));

  McConfig d = a;
  d.seed = 10;
  EXPECT_NE(simulate(spec, vec({0.1, 0.2}), 0.0, 1.0, d).states, ea.states);
}

TEST(Simulate, AntitheticPairsMirrorTheNoise) {
  const auto spec = OperatorSpec::prototype();
  McConfig c = config(1000, 0.1, 2);
  c.antithetic = true;
  const auto e = simulate(spec, Vector::Zero(2), 0.0, 1.0, c);
  for (std::size_t p = 0; p < 1000; p += 2) EXPECT_LT((e.state(0, p) + e.state(0, p + 1)).norm(), 1e-12);
}

TEST(Simulate, Errors) {
  const auto spec = OperatorSpec::prototype();
  auto code = [&](McConfig c, double t1) {
    try {
      simulate(spec, Vector::Zero(2), 0.0, t1, c);
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::internal_inconsistency;
  };
  McConfig c = config(10, 2.0, 0);
  c.scheme = Scheme::euler_maruyama;
  EXPECT_EQ(code(c, 4.0), Errc::step_rejected);
  EXPECT_EQ(code(config(10, 1e-9, 0), 1.0), Errc::step_rejected);
  EXPECT_EQ(code(config(10, -1.0, 0), 1.0), Errc::invalid_argument);
  EXPECT_EQ(code(config(0, 0.1, 0), 1.0), Errc::invalid_argument);

  auto bad = OperatorSpec::prototype();
  bad.coeffs.b = constant_vector(vec({1e308}));
  try {
    simulate(bad, Vector::Zero(2), 0.0, 100.0, config(4, 0.1, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::non_finite);
  }
}

TEST(Simulate, SaveAndLoad) {
  const auto e = simulate(OperatorSpec::prototype(), vec({0.5, 0.0}), 0.0, 1.0, [] {
    McConfig c = config(100, 0.1, 1);
    c.save_times = {0.3};
    return c;
  }());
  const auto prefix = (std::filesystem::temp_directory_path() / "kolmo_ens_test").string();
  e.save(prefix);
  const auto back = PathEnsemble::load(prefix);
  EXPECT_EQ(back.states, e.states);
  EXPECT_EQ(back.weights, e.weights);
  EXPECT_EQ(back.metadata(), e.metadata());
  std::filesystem::remove(prefix + ".json");
  std::filesystem::remove(prefix + ".bin");
}

TEST(Density, HistogramMatchesTheKernel) {
  const auto spec = OperatorSpec::prototype();
  const Vector x0 = vec({0.0, 0.0});
  const auto e = simulate(spec, x0, 0.0, 1.0, config(200000, 0.02, 7));
  DensityOptions o;
  o.bins = {30};
  const auto d = density_estimate(e, 0, o);
  EXPECT_NEAR(d.mass(), 1.0, 1e-12);
  // Bin averages of the density by 4x4 Gauss-Legendre.
  const double g[4] = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563, 0.8611363115940526};
  const double w[4] = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461, 0.3478548451374538};
  std::size_t occupied = 0, inside = 0;
  for (std::size_t f = 0; f < d.size(); ++f) {
    if (d.counts[f] == 0) continue;
    ++occupied;
    const Vector c = d.center(f);
    double avg = 0.0;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        avg += w[a] * w[b] / 4 * prototype_pdf(c(0) + 0.5 * d.width(0) * g[a], c(1) + 0.5 * d.width(1) * g[b], x0, 1.0);
    if (std::abs(d.density[f] - avg) <= 3 * d.se[f]) ++inside;
  }
  EXPECT_GE(static_cast<double>(inside), 0.95 * static_cast<double>(occupied));
  EXPECT_FALSE(d.warnings.empty());

  std::ostringstream os;
  d.write_csv(os);
  EXPECT_EQ(os.str().substr(0, 17), "x1,x2,density,se\n");
}

TEST(Density, SmoothingAndWeights) {
  auto spec = OperatorSpec::prototype();
  spec.coeffs.c = constant_scalar(-0.5);
  const auto e = simulate(spec, Vector::Zero(2), 0.0, 1.0, config(20000, 0.05, 3));
  DensityOptions o;
  o.bins = {20, 25};
  o.normalize = false;
  const auto raw = density_estimate(e, 0, o);
  EXPECT_NEAR(raw.total_mass, std::exp(-0.5), 1e-12);
  EXPECT_NEAR(raw.mass(), std::exp(-0.5), 1e-12);
  o.smooth = true;
  const auto sm = density_estimate(e, 0, o);
  EXPECT_NEAR(sm.mass(), raw.mass(), 0.02);
  EXPECT_GT(sm.bandwidth_bins, 0.0);
  // Smoothing reduces roughness.
  double r0 = 0.0, r1 = 0.0;
  for (std::size_t f = 1; f < raw.size(); ++f) {
    r0 += std::pow(raw.density[f] - raw.density[f - 1], 2);
    r1 += std::pow(sm.density[f] - sm.density[f - 1], 2);
  }
  EXPECT_LT(r1, r0);

  McConfig small = config(100, 0.1, 0);
  EXPECT_THROW(density_estimate(simulate(spec, Vector::Zero(2), 0.0, 1.0, small), 0, {}), Error);
}

TEST(MassInDR, KernelQuadrature) {
  const auto K = GaussianKernel::principal(Group::prototype());
  const Vector y = vec({0.4, -0.3});
  EXPECT_NEAR(mass_in_DR(K, y, 1.0, 0.0, 50.0), 1.0, 1e-12);
  double prev = 0.0;
  for (double R : {0.0, 0.25, 0.5, 1.0, 2.0, 4.0}) {
    const double m = mass_in_DR(K, y, 1.0, 0.0, R);
    EXPECT_GE(m, prev);
    prev = m;
  }
  // Scale covariance: the mass does not depend on t - t0.
  const double ref = mass_in_DR(K, y, 1.0, 0.0, 1.0);
  for (double tau : {0.25, 0.5}) EXPECT_NEAR(mass_in_DR(K, y, 0.3 + tau, 0.3, 1.0), ref, 1e-12);

  // Independent check: polar quadrature of the Gaussian law of
  // w = e^{B}x - y at tau = 1, covariance M C(1) M^T with M = [[1,0],[1,1]].
  Matrix M(2, 2);
  M << 1, 0, 1, 1;
  const Matrix S = M * prototype_cov(1.0) * M.transpose();
  const Matrix Si = S.inverse();
  const double norm = 1.0 / (2 * std::numbers::pi * std::sqrt(S.determinant()));
  double acc = 0.0;
  const int nr = 400, nt = 400;
  for (int a = 0; a < nr; ++a) {
    const double r = (a + 0.5) / nr;
    for (int b = 0; b < nt; ++b) {
      const double th = 2 * std::numbers::pi * b / nt;
      const Vector w = vec({r * std::cos(th), r * std::sin(th)});
      acc += norm * std::exp(-0.5 * w.dot(Si * w)) * r;
    }
  }
  acc *= (1.0 / nr) * (2 * std::numbers::pi / nt);
  EXPECT_NEAR(ref, acc, 1e-5);

  // Heat equation: w ~ N(0, 2), so the mass is erf(R / 2).
  Matrix B1 = Matrix::Zero(1, 1);
  const auto H = GaussianKernel::principal(Group::canonical(B1, {1}));
  EXPECT_NEAR(mass_in_DR(H, vec({0.2}), 0.7, 0.0, 1.3), std::erf(1.3 / 2), 1e-13);
}

TEST(MassInDR, MonteCarloAgreesAndIsScaleInvariant) {
  const auto spec = OperatorSpec::prototype();
  const Vector y = vec({0.2, 0.1});
  const auto K = GaussianKernel::principal(spec.group());
  McConfig c = config(100000, 0.01, 17);
  c.save_times = {0.25, 0.5};
  const auto e = simulate(spec, y, 0.0, 1.0, c);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto r = mass_in_DR(e, k, 1.0);
    EXPECT_NEAR(r.total_mass, 1.0, 1e-15);
    EXPECT_LT(std::abs(r.mass - mass_in_DR(K, y, e.times[k], 0.0, 1.0)), 3 * r.se) << "tau=" << e.times[k];
    EXPECT_EQ(r.fraction, r.mass);
  }
}

TEST(MeasureDR, ScalesWithHalfTheHomogeneousDimension) {
  const Group g = Group::prototype();
  std::vector<double> taus;
  for (int k = 0; k <= 6; ++k) taus.push_back(std::ldexp(1.0, -k));
  const auto rep = measure_DR({1, 1}, g.B(), taus, 1.0, 200000, 3);
  EXPECT_NEAR(rep.slope, 2.0, 0.05);
  // Exact volume: the unit disc scaled by tau^{Q/2}.
  for (std::size_t i = 0; i < taus.size(); ++i)
    EXPECT_NEAR(rep.estimates[i], std::numbers::pi * taus[i] * taus[i], 4 * rep.se[i]);

  const auto moved = measure_DR({1, 1}, g.B(), {0.5}, 1.0, 200000, 3, vec({3.0, -2.0}));
  EXPECT_NEAR(moved.estimates[0], std::numbers::pi * 0.25, 4 * moved.se[0]);
  EXPECT_TRUE(std::isnan(moved.slope));

  Matrix B1 = Matrix::Zero(1, 1);
  EXPECT_NEAR(measure_DR({1}, B1, {1.0, 0.25, 0.0625}, 1.0, 1000, 0).slope, 0.5, 1e-12);
}
