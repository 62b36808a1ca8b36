#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "kolmo/coefficients.hpp"
#include "kolmo/error.hpp"
#include "kolmo/group.hpp"
#include "kolmo/kernel.hpp"
#include "kolmo/parallel.hpp"
#include "kolmo/quadrature.hpp"
#include "kolmo/spec.hpp"

namespace kolmo {

/// Sign of the linear drift: dX = kDriftSign * B X dt + ... . With this sign
/// the law of X_t started at y has mean E(t) y = exp(-tB) y, the kernel's
/// centre. Locked by the calibration test in test_mc.
inline constexpr double kDriftSign = -1.0;

enum class Scheme {
  // X' = E(h) X + E(h/2) [mu h + sigma dW]: exact linear flow, midpoint noise.
  exponential,
  // X' = X + (sign B X + mu) h + sigma dW.
  euler_maruyama,
};

inline const char* to_string(Scheme s) { return s == Scheme::exponential ? "exponential" : "euler_maruyama"; }

inline Scheme scheme_from_string(const std::string& s) {
  if (s == "exponential") return Scheme::exponential;
  if (s == "euler_maruyama" || s == "euler") return Scheme::euler_maruyama;
  fail(Errc::invalid_argument, "unknown scheme '" + s + "'");
}

struct McConfig {
  std::size_t paths = 100000;
  double dt = 1e-2;
  std::uint64_t seed = 0;
  Scheme scheme = Scheme::exponential;
  // Paths per RNG substream. Results depend on it, not on the thread count.
  std::size_t chunk_size = std::size_t{1} << 14;
  bool antithetic = false;
  // Snapshot times in (t0, t1]; t1 is always included.
  std::vector<double> save_times;
  int threads = 0;
  double drift_sign = kDriftSign;

  json to_json() const {
    return {{"paths", paths},     {"dt", dt},
            {"seed", seed},       {"scheme", to_string(scheme)},
            {"chunk_size", chunk_size}, {"antithetic", antithetic},
            {"save_times", save_times}, {"drift_sign", drift_sign}};
  }
};

/// Terminal states of all paths at each snapshot time, with Feynman-Kac
/// weights exp(int (c - tr B) dt).
struct PathEnsemble {
  int N = 0;
  std::size_t paths = 0;
  Vector x0;
  double t0 = 0.0;
  double t1 = 0.0;
  std::vector<double> times;
  std::vector<std::vector<double>> states;   // states[k][p * N + i]
  std::vector<std::vector<double>> weights;  // weights[k][p]
  json config = json::object();
  json provenance = json::object();
  json spec = json::object();
  std::string spec_hash;

  std::size_t index_of(double t) const {
    for (std::size_t k = 0; k < times.size(); ++k)
      if (times[k] == t) return k;
    fail(Errc::invalid_argument, "time is not a snapshot of the ensemble");
  }

  Vector state(std::size_t k, std::size_t p) const {
    return Eigen::Map<const Vector>(states[k].data() + p * static_cast<std::size_t>(N), N);
  }

  json metadata() const {
    std::vector<double> x(x0.data(), x0.data() + x0.size());
    return {{"format", "kolmo.ensemble/1"},
            {"N", N},
            {"paths", paths},
            {"x0", x},
            {"t0", t0},
            {"t1", t1},
            {"times", times},
            {"config", config},
            {"provenance", provenance},
            {"spec", spec},
            {"spec_hash", spec_hash},
            {"layout", "float64 little-endian; per snapshot: paths x N states (row-major), then paths weights"}};
  }

  void save(const std::string& prefix) const {
    {
      std::ofstream m(prefix + ".json");
      if (!m) fail(Errc::invalid_argument, "cannot write '" + prefix + ".json'");
      m << metadata().dump(2) << '\n';
    }
    std::ofstream b(prefix + ".bin", std::ios::binary);
    if (!b) fail(Errc::invalid_argument, "cannot write '" + prefix + ".bin'");
    for (std::size_t k = 0; k < times.size(); ++k) {
      b.write(reinterpret_cast<const char*>(states[k].data()), static_cast<std::streamsize>(states[k].size() * sizeof(double)));
      b.write(reinterpret_cast<const char*>(weights[k].data()), static_cast<std::streamsize>(weights[k].size() * sizeof(double)));
    }
  }

  static PathEnsemble load(const std::string& prefix) {
    std::ifstream m(prefix + ".json");
    if (!m) fail(Errc::parse_error, "cannot open '" + prefix + ".json'");
    json j;
    try {
      m >> j;
    } catch (const json::exception& e) {
      fail(Errc::parse_error, e.what());
    }
    PathEnsemble e;
    try {
      e.N = j.at("N").get<int>();
      e.paths = j.at("paths").get<std::size_t>();
      const auto x = j.at("x0").get<std::vector<double>>();
      e.x0 = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
      e.t0 = j.at("t0").get<double>();
      e.t1 = j.at("t1").get<double>();
      e.times = j.at("times").get<std::vector<double>>();
      e.config = j.value("config", json::object());
      e.provenance = j.value("provenance", json::object());
      e.spec = j.value("spec", json::object());
      e.spec_hash = j.value("spec_hash", std::string{});
    } catch (const json::exception& ex) {
      fail(Errc::parse_error, ex.what());
    }
    std::ifstream b(prefix + ".bin", std::ios::binary);
    if (!b) fail(Errc::parse_error, "cannot open '" + prefix + ".bin'");
    e.states.assign(e.times.size(), std::vector<double>(e.paths * static_cast<std::size_t>(e.N)));
    e.weights.assign(e.times.size(), std::vector<double>(e.paths));
    for (std::size_t k = 0; k < e.times.size(); ++k) {
      auto& s = e.states[k];
      auto& w = e.weights[k];
      if (!b.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(s.size() * sizeof(double))) ||
          !b.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(double))))
        fail(Errc::parse_error, "binary payload is truncated");
    }
    return e;
  }
};

namespace detail {

inline bool is_constant(const Field& f) { return f && dynamic_cast<const ConstantField*>(f.impl()) != nullptr; }

// In-place lower Cholesky factor of the m x m row-major matrix a. A zero
// pivot yields a zero column, so degenerate (noise-free) directions are
// allowed; negative pivots are rejected.
inline bool cholesky_inplace(double* a, int m) {
  double scale = 0.0;
  for (int j = 0; j < m; ++j) scale = std::max(scale, std::abs(a[j * m + j]));
  for (int j = 0; j < m; ++j) {
    double d = a[j * m + j];
    for (int k = 0; k < j; ++k) d -= a[j * m + k] * a[j * m + k];
    if (!(d >= -1e-14 * scale)) return false;
    d = d > 0.0 ? std::sqrt(d) : 0.0;
    a[j * m + j] = d;
    for (int i = j + 1; i < m; ++i) {
      double s = a[i * m + j];
      for (int k = 0; k < j; ++k) s -= a[i * m + k] * a[j * m + k];
      a[i * m + j] = d > 0.0 ? s / d : 0.0;
    }
    for (int k = j + 1; k < m; ++k) a[j * m + k] = 0.0;
  }
  return true;
}

// Per-segment step operators: X' = P X + G (mu h + sigma dW).
struct StepOps {
  double h = 0.0;
  int steps = 0;
  std::vector<double> P;  // N x N row-major
  std::vector<double> G;  // N x m0 row-major
};

inline StepOps step_ops(const Group& g, int m0, Scheme scheme, double sign, double h, int steps) {
  const int N = g.N();
  Matrix P, G;
  if (scheme == Scheme::exponential) {
    // exp(sign h B); sign = -1 gives E(h).
    P = g.exp_drift(-sign * h);
    G = g.exp_drift(-sign * 0.5 * h).leftCols(m0);
  } else {
    P = Matrix::Identity(N, N) + sign * h * g.B();
    G = Matrix::Identity(N, N).leftCols(m0);
  }
  StepOps s;
  s.h = h;
  s.steps = steps;
  s.P.resize(static_cast<std::size_t>(N * N));
  s.G.resize(static_cast<std::size_t>(N * m0));
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < N; ++j) s.P[static_cast<std::size_t>(i * N + j)] = P(i, j);
    for (int j = 0; j < m0; ++j) s.G[static_cast<std::size_t>(i * m0 + j)] = G(i, j);
  }
  return s;
}

inline std::mt19937_64 chunk_stream(std::uint64_t seed, std::uint64_t chunk) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(chunk), static_cast<std::uint32_t>(chunk >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace detail

/// Simulates dX = (sign B X + a - b) dt + sigma dW with sigma sigma^T = 2 A0
/// in the first block, started at x0 at time t0. Weights carry
/// exp(int (c - tr B) dt), so that the weighted law of X_t is Gamma(., t; x0, t0)
/// for constant coefficients. Variable A0 is evaluated at the current state
/// (Ito, explicit); the drift correction d_j A_ij is not applied.
inline PathEnsemble simulate(const OperatorSpec& spec, const Vector& x0, double t0, double t1, McConfig cfg) {
  const Group g = spec.group();
  const int N = g.N(), m0 = spec.m0();
  require(x0.size() == N, "x0 has the wrong dimension");
  require(cfg.paths >= 1, "paths must be at least 1");
  require(cfg.dt > 0.0, "dt must be positive");
  require(t1 > t0, "t1 must exceed t0");
  require(cfg.chunk_size >= 2, "chunk_size must be at least 2");
  if (cfg.antithetic) require(cfg.chunk_size % 2 == 0, "antithetic pairs need an even chunk_size");

  std::vector<double> times;
  for (double s : cfg.save_times) {
    require(s > t0 && s <= t1, "save times must lie in (t0, t1]");
    times.push_back(s);
  }
  times.push_back(t1);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  cfg.save_times = times;

  // Steps are sized per segment so that snapshots are hit exactly.
  constexpr double kMaxSteps = 1e7;
  const double bnorm = g.B().cwiseAbs().rowwise().sum().maxCoeff();
  const double dt_bound = cfg.scheme == Scheme::euler_maruyama && bnorm > 0.0 ? 1.0 / bnorm : std::numeric_limits<double>::infinity();
  if (cfg.dt > dt_bound) fail(Errc::step_rejected, "dt exceeds 1/|B| for the explicit scheme");
  if ((t1 - t0) / cfg.dt > kMaxSteps) fail(Errc::step_rejected, "more than 1e7 steps requested");
  std::vector<detail::StepOps> segs;
  double prev = t0;
  for (double s : times) {
    const int n = std::max(1, static_cast<int>(std::ceil((s - prev) / cfg.dt - 1e-9)));
    segs.push_back(detail::step_ops(g, m0, cfg.scheme, cfg.drift_sign, (s - prev) / n, n));
    prev = s;
  }

  const auto& k = spec.coeffs;
  const bool constA = detail::is_constant(k.A0);
  const bool has_mu = static_cast<bool>(k.a) || static_cast<bool>(k.b);
  const bool constMu = (!k.a || detail::is_constant(k.a)) && (!k.b || detail::is_constant(k.b));
  const bool has_c = static_cast<bool>(k.c);
  const bool constC = !has_c || detail::is_constant(k.c);
  const double trB = g.trace_B();

  auto sigma_at = [&](const Vector& x, double t, double* out) {
    const Matrix A = k.A0(x, t);
    for (int i = 0; i < m0; ++i)
      for (int j = 0; j < m0; ++j) out[i * m0 + j] = 2.0 * A(i, j);
    if (!detail::cholesky_inplace(out, m0)) fail(Errc::not_spd, "A0 is not positive semidefinite along a path");
  };
  auto mu_at = [&](const Vector& x, double t, double* out) {
    for (int i = 0; i < m0; ++i) out[i] = 0.0;
    if (k.a) {
      const Matrix a = k.a(x, t);
      for (int i = 0; i < m0; ++i) out[i] += a(i, 0);
    }
    if (k.b) {
      const Matrix b = k.b(x, t);
      for (int i = 0; i < m0; ++i) out[i] -= b(i, 0);
    }
  };

  const Vector probe = x0;
  std::vector<double> sigma0(static_cast<std::size_t>(m0 * m0)), mu0(static_cast<std::size_t>(m0), 0.0);
  if (constA) sigma_at(probe, t0, sigma0.data());
  if (has_mu && constMu) mu_at(probe, t0, mu0.data());
  const double c0 = has_c && constC ? k.c.scalar(probe, t0) : 0.0;

  PathEnsemble ens;
  ens.N = N;
  ens.paths = cfg.paths;
  ens.x0 = x0;
  ens.t0 = t0;
  ens.t1 = t1;
  ens.times = times;
  ens.states.assign(times.size(), std::vector<double>(cfg.paths * static_cast<std::size_t>(N)));
  ens.weights.assign(times.size(), std::vector<double>(cfg.paths));

  const std::size_t chunks = (cfg.paths + cfg.chunk_size - 1) / cfg.chunk_size;
  const std::size_t lanes = cfg.antithetic ? 2 : 1;

  parallel_for(chunks, cfg.threads, [&](std::size_t cb, std::size_t ce) {
    std::vector<double> x(lanes * static_cast<std::size_t>(N)), y(static_cast<std::size_t>(N));
    std::vector<double> z(static_cast<std::size_t>(m0)), inc(static_cast<std::size_t>(m0));
    std::vector<double> sig(sigma0), mu(mu0);
    double logw[2];
    Vector xv(N);
    for (std::size_t c = cb; c < ce; ++c) {
      auto rng = detail::chunk_stream(cfg.seed, c);
      std::normal_distribution<double> normal;
      const std::size_t pb = c * cfg.chunk_size, pe = std::min(cfg.paths, pb + cfg.chunk_size);
      for (std::size_t p = pb; p < pe; p += lanes) {
        const std::size_t live = std::min(lanes, pe - p);
        for (std::size_t l = 0; l < lanes; ++l) {
          for (int i = 0; i < N; ++i) x[l * static_cast<std::size_t>(N) + static_cast<std::size_t>(i)] = x0(i);
          logw[l] = 0.0;
        }
        double t = t0;
        for (std::size_t sIdx = 0; sIdx < segs.size(); ++sIdx) {
          const auto& S = segs[sIdx];
          const double sq = std::sqrt(S.h);
          for (int n = 0; n < S.steps; ++n) {
            for (int i = 0; i < m0; ++i) z[static_cast<std::size_t>(i)] = normal(rng);
            for (std::size_t l = 0; l < lanes; ++l) {
              double* xl = x.data() + l * static_cast<std::size_t>(N);
              const double flip = l == 0 ? 1.0 : -1.0;
              const bool need_x = !constA || (has_mu && !constMu) || !constC;
              if (need_x) {
                for (int i = 0; i < N; ++i) xv(i) = xl[i];
                if (!constA) sigma_at(xv, t, sig.data());
                if (has_mu && !constMu) mu_at(xv, t, mu.data());
                logw[l] += ((constC ? c0 : k.c.scalar(xv, t)) - trB) * S.h;
              } else {
                logw[l] += (c0 - trB) * S.h;
              }
              for (int i = 0; i < m0; ++i) {
                double s = 0.0;
                for (int j = 0; j <= i; ++j) s += sig[static_cast<std::size_t>(i * m0 + j)] * z[static_cast<std::size_t>(j)];
                inc[static_cast<std::size_t>(i)] = mu[static_cast<std::size_t>(i)] * S.h + flip * sq * s;
              }
              for (int i = 0; i < N; ++i) {
                double s = 0.0;
                const double* Pi = S.P.data() + i * N;
                for (int j = 0; j < N; ++j) s += Pi[j] * xl[j];
                const double* Gi = S.G.data() + i * m0;
                for (int j = 0; j < m0; ++j) s += Gi[j] * inc[static_cast<std::size_t>(j)];
                y[static_cast<std::size_t>(i)] = s;
              }
              std::copy(y.begin(), y.end(), xl);
            }
            t += S.h;
          }
          for (std::size_t l = 0; l < live; ++l) {
            const double* xl = x.data() + l * static_cast<std::size_t>(N);
            double* dst = ens.states[sIdx].data() + (p + l) * static_cast<std::size_t>(N);
            for (int i = 0; i < N; ++i) {
              if (!std::isfinite(xl[i])) fail(Errc::non_finite, "path state became non-finite");
              dst[i] = xl[i];
            }
            ens.weights[sIdx][p + l] = std::exp(logw[l]);
          }
          t = times[sIdx];
        }
      }
    }
  }, 2);

  ens.config = cfg.to_json();
  ens.provenance = {{"generator", "mt19937_64"},
                    {"substream", "seed_seq(seed_lo, seed_hi, chunk_lo, chunk_hi)"},
                    {"normal", "std::normal_distribution<double>"},
                    {"chunks", chunks},
                    {"steps", [&] {
                       json a = json::array();
                       for (const auto& s : segs) a.push_back(s.steps);
                       return a;
                     }()},
                    {"dt_bound", std::isfinite(dt_bound) ? json(dt_bound) : json(nullptr)},
                    {"ito_correction", false}};
  ens.spec = to_json(spec);
  ens.spec_hash = spec_hash(spec);
  return ens;
}

// ---------------------------------------------------------------- statistics

/// Unweighted sample mean and covariance with standard errors; the covariance
/// SE uses the empirical fourth moment.
struct Moments {
  Vector mean, mean_se;
  Matrix cov, cov_se;
  std::size_t n = 0;
};

inline Moments moments(const PathEnsemble& e, std::size_t k) {
  require(k < e.times.size(), "snapshot index out of range");
  require(e.paths >= 2, "moments need at least two paths");
  const int N = e.N;
  const std::size_t n = e.paths;
  const auto& s = e.states[k];
  Moments m;
  m.n = n;
  m.mean = Vector::Zero(N);
  for (std::size_t p = 0; p < n; ++p)
    for (int i = 0; i < N; ++i) m.mean(i) += s[p * static_cast<std::size_t>(N) + static_cast<std::size_t>(i)];
  m.mean /= static_cast<double>(n);
  m.cov = Matrix::Zero(N, N);
  for (std::size_t p = 0; p < n; ++p)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j)
        m.cov(i, j) += (s[p * N + i] - m.mean(i)) * (s[p * N + j] - m.mean(j));
  m.cov /= static_cast<double>(n - 1);
  m.mean_se = (m.cov.diagonal() / static_cast<double>(n)).cwiseSqrt();
  m.cov_se = Matrix::Zero(N, N);
  for (std::size_t p = 0; p < n; ++p)
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < N; ++j) {
        const double d = (s[p * N + i] - m.mean(i)) * (s[p * N + j] - m.mean(j)) - m.cov(i, j);
        m.cov_se(i, j) += d * d;
      }
  m.cov_se = (m.cov_se / static_cast<double>(n - 1) / static_cast<double>(n)).cwiseSqrt();
  return m;
}

// ---------------------------------------------------------------- density

struct DensityOptions {
  std::vector<int> bins;  // per axis; one entry broadcasts
  Vector lo, hi;          // empty: data range, so the histogram holds every path
  bool normalize = true;  // divide by the total weight (mass 1) or by the path count
  bool smooth = false;    // binned Gaussian smoothing, Scott bandwidth
};

struct DensityEstimate {
  Vector lo, hi;
  std::vector<int> bins;
  std::vector<double> density, se, counts;
  std::size_t paths = 0;
  double total_mass = 0.0;  // mean weight
  double bandwidth_bins = 0.0;
  std::vector<std::string> warnings;

  int dim() const { return static_cast<int>(bins.size()); }
  std::size_t size() const { return density.size(); }
  double width(int i) const { return (hi(i) - lo(i)) / bins[static_cast<std::size_t>(i)]; }
  double cell_volume() const {
    double v = 1.0;
    for (int i = 0; i < dim(); ++i) v *= width(i);
    return v;
  }
  std::vector<int> unflat(std::size_t f) const {
    std::vector<int> idx(bins.size());
    for (int i = dim() - 1; i >= 0; --i) {
      idx[static_cast<std::size_t>(i)] = static_cast<int>(f % static_cast<std::size_t>(bins[static_cast<std::size_t>(i)]));
      f /= static_cast<std::size_t>(bins[static_cast<std::size_t>(i)]);
    }
    return idx;
  }
  Vector center(std::size_t f) const {
    const auto idx = unflat(f);
    Vector c(dim());
    for (int i = 0; i < dim(); ++i) c(i) = lo(i) + (idx[static_cast<std::size_t>(i)] + 0.5) * width(i);
    return c;
  }
  double mass() const {
    double m = 0.0;
    for (double d : density) m += d;
    return m * cell_volume();
  }

  /// Columns x1..xN (bin centres), density, se; 17 significant digits.
  void write_csv(std::ostream& os) const {
    const auto old = os.precision(17);
    for (int i = 0; i < dim(); ++i) os << 'x' << (i + 1) << ',';
    os << "density,se\n";
    for (std::size_t f = 0; f < size(); ++f) {
      const Vector c = center(f);
      for (int i = 0; i < dim(); ++i) os << c(i) << ',';
      os << density[f] << ',' << se[f] << '\n';
    }
    os.precision(old);
  }
};

/// Weighted histogram of snapshot k with Poisson per-bin standard errors
/// sqrt(sum w^2) / (norm * volume).
inline DensityEstimate density_estimate(const PathEnsemble& e, std::size_t k, DensityOptions opt) {
  require(k < e.times.size(), "snapshot index out of range");
  if (e.paths < 10000) fail(Errc::invalid_argument, "density estimation needs at least 1e4 paths");
  const int N = e.N;
  if (opt.bins.empty()) opt.bins = {50};
  if (opt.bins.size() == 1) opt.bins.assign(static_cast<std::size_t>(N), opt.bins[0]);
  require(static_cast<int>(opt.bins.size()) == N, "bins must have one entry per axis");
  for (int b : opt.bins) require(b >= 1, "bin counts must be positive");
  const auto& s = e.states[k];
  const auto& w = e.weights[k];

  DensityEstimate d;
  d.bins = opt.bins;
  d.paths = e.paths;
  if (opt.lo.size() == 0) {
    d.lo = Vector::Constant(N, std::numeric_limits<double>::infinity());
    d.hi = Vector::Constant(N, -std::numeric_limits<double>::infinity());
    for (std::size_t p = 0; p < e.paths; ++p)
      for (int i = 0; i < N; ++i) {
        d.lo(i) = std::min(d.lo(i), s[p * N + i]);
        d.hi(i) = std::max(d.hi(i), s[p * N + i]);
      }
    for (int i = 0; i < N; ++i)
      if (!(d.hi(i) > d.lo(i))) d.hi(i) = d.lo(i) + 1.0;
  } else {
    require(opt.lo.size() == N && opt.hi.size() == N, "range has the wrong dimension");
    require((opt.hi - opt.lo).minCoeff() > 0.0, "range must satisfy lo < hi");
    d.lo = opt.lo;
    d.hi = opt.hi;
  }
  std::size_t M = 1;
  for (int b : d.bins) M *= static_cast<std::size_t>(b);
  std::vector<double> sw(M, 0.0), sw2(M, 0.0);
  d.counts.assign(M, 0.0);
  double wtot = 0.0;
  std::size_t outside = 0;
  for (std::size_t p = 0; p < e.paths; ++p) {
    wtot += w[p];
    std::size_t f = 0;
    bool in = true;
    for (int i = 0; i < N && in; ++i) {
      const double x = s[p * N + i];
      if (x < d.lo(i) || x > d.hi(i)) {
        in = false;
        break;
      }
      const int b = std::min(static_cast<int>((x - d.lo(i)) / d.width(i)), d.bins[static_cast<std::size_t>(i)] - 1);
      f = f * static_cast<std::size_t>(d.bins[static_cast<std::size_t>(i)]) + static_cast<std::size_t>(b);
    }
    if (!in) {
      ++outside;
      continue;
    }
    sw[f] += w[p];
    sw2[f] += w[p] * w[p];
    d.counts[f] += 1.0;
  }
  d.total_mass = wtot / static_cast<double>(e.paths);
  const double norm = (opt.normalize ? wtot : static_cast<double>(e.paths)) * d.cell_volume();
  d.density.resize(M);
  d.se.resize(M);
  for (std::size_t f = 0; f < M; ++f) {
    d.density[f] = sw[f] / norm;
    d.se[f] = std::sqrt(sw2[f]) / norm;
  }

  if (opt.smooth) {
    // Scott bandwidth per axis, in bin units, applied as a separable
    // convolution whose weights are renormalised at the edges.
    const Moments m = moments(e, k);
    for (int ax = 0; ax < N; ++ax) {
      const double bw = std::sqrt(m.cov(ax, ax)) * std::pow(static_cast<double>(e.paths), -1.0 / (N + 4)) / d.width(ax);
      if (ax == 0) d.bandwidth_bins = bw;
      if (!(bw > 0.0)) continue;
      const int reach = static_cast<int>(std::ceil(4.0 * bw));
      std::vector<double> ker(static_cast<std::size_t>(2 * reach + 1));
      for (int q = -reach; q <= reach; ++q) ker[static_cast<std::size_t>(q + reach)] = std::exp(-0.5 * q * q / (bw * bw));
      std::vector<double> nd(M, 0.0), nse(M, 0.0);
      const int nb = d.bins[static_cast<std::size_t>(ax)];
      std::size_t stride = 1;
      for (int i = ax + 1; i < N; ++i) stride *= static_cast<std::size_t>(d.bins[static_cast<std::size_t>(i)]);
      for (std::size_t f = 0; f < M; ++f) {
        const int b = static_cast<int>((f / stride) % static_cast<std::size_t>(nb));
        double acc = 0.0, acc2 = 0.0, ws = 0.0;
        for (int q = std::max(-reach, -b); q <= std::min(reach, nb - 1 - b); ++q) {
          const double kw = ker[static_cast<std::size_t>(q + reach)];
          const std::size_t g = static_cast<std::size_t>(static_cast<long long>(f) + static_cast<long long>(q) * static_cast<long long>(stride));
          acc += kw * d.density[g];
          acc2 += kw * kw * d.se[g] * d.se[g];
          ws += kw;
        }
        nd[f] = acc / ws;
        nse[f] = std::sqrt(acc2) / ws;
      }
      d.density.swap(nd);
      d.se.swap(nse);
    }
  }

  std::size_t empty = 0;
  for (double c : d.counts)
    if (c == 0.0) ++empty;
  if (empty > 0) d.warnings.push_back("EmptyBins: " + std::to_string(empty) + " of " + std::to_string(M) + " bins are empty");
  if (outside > 0) d.warnings.push_back("OutsideRange: " + std::to_string(outside) + " paths fall outside the histogram range");
  return d;
}

// ---------------------------------------------------------------- D_R sets

/// w = delta^0_{1/sqrt(tau)} (e^{tau B} x - y): the rescaled displacement that
/// defines D_R = {x : |w| <= R}.
inline Vector dr_coordinate(const Group& g, const Vector& x, const Vector& y, double tau) {
  return g.dilate_space(1.0 / std::sqrt(tau), g.exp_B(tau) * x - y);
}

namespace detail {

// P(sum lam_i Z_i^2 <= s) for standard normals, by nested Gauss-Legendre in
// z_k = a sin(theta), which removes the square-root edge behaviour.
inline double chi2_mix_cdf(const std::vector<double>& lam, std::size_t k, double s, const quad::Rule& rule) {
  if (!(s > 0.0)) return 0.0;
  const double l = lam[k];
  if (k + 1 == lam.size()) return std::erf(std::sqrt(s / (2.0 * l)));
  const double a = std::sqrt(s / l);
  double acc = 0.0;
  for (std::size_t q = 0; q < rule.size(); ++q) {
    const double th = rule.nodes[q];
    const double z = a * std::sin(th);
    const double c = std::cos(th);
    acc += rule.weights[q] * std::exp(-0.5 * z * z) * a * c * chi2_mix_cdf(lam, k + 1, s * c * c, rule);
  }
  return 2.0 * acc / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace detail

/// Integral of Gamma(., t; y, t0) over D_R(y, t - t0). The rescaled
/// displacement is Gaussian with a covariance that does not depend on t - t0,
/// so the integral is P(|w| <= R) times the kernel mass exp(-(t - t0) tr B);
/// it does not depend on the pole y.
inline double mass_in_DR(const GaussianKernel& K, [[maybe_unused]] const Vector& y, double t, double t0, double R, double tol = 1e-12) {
  require(t > t0, "mass_in_DR requires t > t0");
  require(R >= 0.0, "R must be non-negative");
  const Group& g = K.group();
  const int N = g.N();
  if (N > 5) fail(Errc::invalid_argument, "kernel quadrature for D_R supports N <= 5");
  const double tau = t - t0;
  Matrix D = Matrix::Zero(N, N);
  for (int i = 0; i < N; ++i) D(i, i) = ipow(1.0 / std::sqrt(tau), g.blocks().alpha[static_cast<std::size_t>(i)]);
  const Matrix M = D * g.exp_B(tau);
  const Matrix S = M * K.sigma(tau).C * M.transpose();
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (S + S.transpose()), Eigen::EigenvaluesOnly);
  std::vector<double> lam(es.eigenvalues().data(), es.eigenvalues().data() + N);
  std::sort(lam.rbegin(), lam.rend());
  const double scale = std::exp(-tau * g.trace_B());
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t n = 16; n <= 512; n *= 2) {
    const double p = detail::chi2_mix_cdf(lam, 0, R * R, quad::gauss_legendre(n, 0.0, 0.5 * std::numbers::pi));
    if (std::abs(p - prev) <= tol) return scale * p;
    prev = p;
  }
  fail(Errc::quadrature_unconverged, "D_R mass quadrature did not converge");
}

struct MassReport {
  double mass = 0.0;      // weighted mass inside D_R per path
  double fraction = 0.0;  // share of the total weight inside D_R
  double se = 0.0;        // standard error of `mass`
  double total_mass = 0.0;
  double tau = 0.0;
};

/// Monte-Carlo version over snapshot k of an ensemble started at its x0.
inline MassReport mass_in_DR(const PathEnsemble& e, std::size_t k, double R) {
  require(k < e.times.size(), "snapshot index out of range");
  require(R >= 0.0, "R must be non-negative");
  require(!e.spec.is_null() && e.spec.contains("structure"), "ensemble has no operator structure");
  const Group g = Group::canonical(detail::json_to_matrix(e.spec["structure"]["B"]),
                                   e.spec["structure"]["blocks"].get<std::vector<int>>());
  MassReport r;
  r.tau = e.times[k] - e.t0;
  double in = 0.0, in2 = 0.0, tot = 0.0;
  for (std::size_t p = 0; p < e.paths; ++p) {
    const double w = e.weights[k][p];
    tot += w;
    if (dr_coordinate(g, e.state(k, p), e.x0, r.tau).norm() <= R) {
      in += w;
      in2 += w * w;
    }
  }
  const double n = static_cast<double>(e.paths);
  r.mass = in / n;
  r.total_mass = tot / n;
  r.fraction = tot > 0.0 ? in / tot : 0.0;
  r.se = std::sqrt(std::max(0.0, in2 / n - r.mass * r.mass) / n);
  return r;
}

/// c3 in total_mass(tau) ~ exp(-c3 tau), least squares through the origin
/// over the ensemble's snapshots. Reported, never asserted.
inline double fit_mass_decay(const PathEnsemble& e) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < e.times.size(); ++k) {
    double tot = 0.0;
    for (double w : e.weights[k]) tot += w;
    const double tau = e.times[k] - e.t0;
    num += tau * std::log(tot / static_cast<double>(e.paths));
    den += tau * tau;
  }
  return -num / den;
}

struct MeasureReport {
  std::vector<double> taus, estimates, se;
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
};

/// Monte-Carlo volume of D_R(y, tau) for each tau, sampled uniformly in the
/// bounding box of its preimage, and the least-squares slope of log(meas)
/// against log(tau) (defined when at least two taus are given).
inline MeasureReport measure_DR(const std::vector<int>& blocks, const Matrix& B, const std::vector<double>& taus, double R,
                                std::size_t trials, std::uint64_t seed = 0, Vector y = Vector()) {
  const Group g = Group::canonical(B, blocks);
  const int N = g.N();
  if (y.size() == 0) y = Vector::Zero(N);
  require(y.size() == N, "y has the wrong dimension");
  require(R > 0.0, "R must be positive");
  require(trials >= 1, "trials must be positive");
  MeasureReport rep;
  for (std::size_t ti = 0; ti < taus.size(); ++ti) {
    const double tau = taus[ti];
    require(tau > 0.0, "tau must be positive");
    // x = E(tau) (y + delta^0_{sqrt tau} w), |w| <= R.
    const Matrix E = g.exp_drift(tau);
    Vector half(N), centre = E * y;
    for (int i = 0; i < N; ++i) {
      half(i) = 0.0;
      for (int j = 0; j < N; ++j) half(i) += std::abs(E(i, j)) * R * ipow(std::sqrt(tau), g.blocks().alpha[static_cast<std::size_t>(j)]);
    }
    double vol = 1.0;
    for (int i = 0; i < N; ++i) vol *= 2.0 * half(i);
    auto rng = detail::chunk_stream(seed, ti);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    std::size_t hit = 0;
    Vector x(N);
    for (std::size_t s = 0; s < trials; ++s) {
      for (int i = 0; i < N; ++i) x(i) = centre(i) + half(i) * U(rng);
      if (dr_coordinate(g, x, y, tau).norm() <= R) ++hit;
    }
    const double f = static_cast<double>(hit) / static_cast<double>(trials);
    rep.taus.push_back(tau);
    rep.estimates.push_back(f * vol);
    rep.se.push_back(vol * std::sqrt(f * (1.0 - f) / static_cast<double>(trials)));
  }
  if (taus.size() >= 2) {
    double mx = 0.0, my = 0.0;
    const double n = static_cast<double>(taus.size());
    for (std::size_t i = 0; i < taus.size(); ++i) mx += std::log(taus[i]) / n, my += std::log(rep.estimates[i]) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < taus.size(); ++i) {
      const double dx = std::log(taus[i]) - mx;
      sxy += dx * (std::log(rep.estimates[i]) - my);
      sxx += dx * dx;
    }
    rep.slope = sxy / sxx;
    rep.intercept = my - rep.slope * mx;
  }
  return rep;
}

}  // namespace kolmo
