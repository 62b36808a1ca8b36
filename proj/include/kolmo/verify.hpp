#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kolmo/error.hpp"
#include "kolmo/group.hpp"
#include "kolmo/kernel.hpp"
#include "kolmo/mc.hpp"
#include "kolmo/parallel.hpp"
#include "kolmo/pde.hpp"

namespace kolmo {

using ScalarFn = std::function<double(const Vector&, double)>;

inline json point_json(const GroupPoint& z) {
  return {{"x", std::vector<double>(z.x.data(), z.x.data() + z.x.size())}, {"t", z.t}};
}

// ---------------------------------------------------------------- Gaussian sandwich

/// One estimate of Gamma_L at (x, t) with its numerical error budget.
struct KernelSample {
  Vector x;
  double t = 0.0;
  double value = 0.0;
  double err = 0.0;
};

struct SandwichOptions {
  // A sample whose ratio to the envelope exceeds outlier_factor times the
  // median ratio (or falls below median / outlier_factor) is a violation.
  double outlier_factor = 1e3;
};

struct BoundReport {
  double lambda_plus = 0.0, C_plus = 0.0;
  double lambda_minus = 0.0, C_minus = 0.0;
  std::vector<double> lambda_grid, C_plus_curve, C_minus_curve;
  std::vector<std::size_t> violations;  // indices into the sample list
  std::vector<std::string> reasons;     // one per violation
  std::size_t used = 0, skipped = 0;
  double grid_tol = 0.0;  // largest relative error budget among used samples
  json grid = json::object();

  json to_json() const {
    return {{"lambda_plus", lambda_plus},
            {"C_plus", C_plus},
            {"lambda_minus", lambda_minus},
            {"C_minus", C_minus},
            {"lambda_grid", lambda_grid},
            {"C_plus_curve", C_plus_curve},
            {"C_minus_curve", C_minus_curve},
            {"violations", violations},
            {"reasons", reasons},
            {"samples_used", used},
            {"samples_skipped", skipped},
            {"grid_tol", grid_tol},
            {"grid", grid}};
  }
};

/// Fits C-(lambda) Gamma_K^lambda <= Gamma_L <= C+(lambda) Gamma_K^lambda over the
/// samples, each allowed to move by its error budget: C+(lambda) is the
/// largest (v - err) / Gamma_K^lambda, C-(lambda) the smallest
/// (v + err) / Gamma_K^lambda; lambda+ minimises C+ and lambda- maximises C-.
/// Samples within their budget of zero (or subnormal) carry no information and
/// are skipped. Violations are non-finite values, values below -err, and
/// ratio outliers; they are excluded from the fitted constants.
inline BoundReport fit_sandwich(const std::vector<KernelSample>& samples, const GroupPoint& pole,
                                std::vector<double> lambda_grid, const std::vector<int>& blocks, const Matrix& B,
                                SandwichOptions opt = {}) {
  require(!lambda_grid.empty(), "lambda grid must not be empty");
  for (double l : lambda_grid) require(l > 0.0, "lambda values must be positive");
  require(opt.outlier_factor > 1.0, "outlier_factor must exceed 1");
  std::sort(lambda_grid.begin(), lambda_grid.end());
  const Group g = Group::canonical(B, blocks);

  BoundReport rep;
  rep.lambda_grid = lambda_grid;
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    require(s.x.size() == g.N(), "sample dimension does not match B");
    require(s.err >= 0.0, "error budgets must be non-negative");
    if (!std::isfinite(s.value)) {
      rep.violations.push_back(i);
      rep.reasons.push_back("non-finite value");
    } else if (!(s.t > pole.t) || std::abs(s.value) <= s.err || std::abs(s.value) < std::numeric_limits<double>::min()) {
      ++rep.skipped;
    } else if (s.value < 0.0) {
      rep.violations.push_back(i);
      rep.reasons.push_back("negative beyond its error budget");
    } else {
      valid.push_back(i);
    }
  }
  if (valid.empty()) fail(Errc::no_admissible_fit, "no sample is distinguishable from zero");

  // log of the ratios v / Gamma_K^lambda, (v - err) / ..., (v + err) / ...
  const std::size_t L = lambda_grid.size(), V = valid.size();
  std::vector<std::vector<double>> lr(L, std::vector<double>(V)), lo(L, std::vector<double>(V)), hi(L, std::vector<double>(V));
  for (std::size_t l = 0; l < L; ++l) {
    const GaussianKernel K = GaussianKernel::scaled(g, lambda_grid[l]);
    for (std::size_t v = 0; v < V; ++v) {
      const auto& s = samples[valid[v]];
      const double lk = K.log_value(s.x, s.t, pole.x, pole.t);
      lr[l][v] = std::log(s.value) - lk;
      lo[l][v] = std::log(s.value - s.err) - lk;
      hi[l][v] = std::log(s.value + s.err) - lk;
    }
  }
  std::vector<char> keep(V, 1);
  auto quantile = [&](const std::vector<double>& a, double q) {
    std::vector<double> b;
    for (std::size_t v = 0; v < V; ++v)
      if (keep[v]) b.push_back(a[v]);
    const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(b.size() - 1)));
    std::nth_element(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(k), b.end());
    return b[k];
  };

  // Outliers: ratios beyond outlier_factor times the median at envelopes
  // selected by robust (1% / 99%) quantiles, so that a single spike cannot
  // steer the selection.
  std::size_t ip = 0, im = 0;
  for (std::size_t l = 1; l < L; ++l) {
    if (quantile(lr[l], 0.99) < quantile(lr[ip], 0.99)) ip = l;
    if (quantile(lr[l], 0.01) > quantile(lr[im], 0.01)) im = l;
  }
  const double mp = quantile(lr[ip], 0.5), mm = quantile(lr[im], 0.5), lf = std::log(opt.outlier_factor);
  for (std::size_t v = 0; v < V; ++v) {
    const bool up = lr[ip][v] > mp + lf, down = lr[im][v] < mm - lf;
    if (up || down) {
      keep[v] = 0;
      rep.violations.push_back(valid[v]);
      rep.reasons.push_back(up ? "exceeds the envelope by more than the outlier factor"
                               : "falls below the envelope by more than the outlier factor");
    }
  }

  rep.C_plus_curve.assign(L, 0.0);
  rep.C_minus_curve.assign(L, std::numeric_limits<double>::infinity());
  for (std::size_t l = 0; l < L; ++l) {
    double mx = -std::numeric_limits<double>::infinity(), mn = std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < V; ++v)
      if (keep[v]) mx = std::max(mx, lo[l][v]), mn = std::min(mn, hi[l][v]);
    rep.C_plus_curve[l] = std::exp(mx);
    rep.C_minus_curve[l] = std::exp(mn);
  }
  ip = static_cast<std::size_t>(std::min_element(rep.C_plus_curve.begin(), rep.C_plus_curve.end()) - rep.C_plus_curve.begin());
  im = static_cast<std::size_t>(std::max_element(rep.C_minus_curve.begin(), rep.C_minus_curve.end()) - rep.C_minus_curve.begin());
  if (!(rep.C_minus_curve[im] > 0.0) || !std::isfinite(rep.C_plus_curve[ip]))
    fail(Errc::no_admissible_fit, "no lambda gives a positive lower constant and a finite upper constant");

  rep.lambda_plus = lambda_grid[ip];
  rep.C_plus = rep.C_plus_curve[ip];
  rep.lambda_minus = lambda_grid[im];
  rep.C_minus = rep.C_minus_curve[im];
  for (std::size_t v = 0; v < V; ++v)
    if (keep[v]) {
      ++rep.used;
      rep.grid_tol = std::max(rep.grid_tol, samples[valid[v]].err / samples[valid[v]].value);
    }
  std::vector<std::pair<std::size_t, std::string>> vr;
  for (std::size_t i = 0; i < rep.violations.size(); ++i) vr.emplace_back(rep.violations[i], rep.reasons[i]);
  std::sort(vr.begin(), vr.end());
  for (std::size_t i = 0; i < vr.size(); ++i) rep.violations[i] = vr[i].first, rep.reasons[i] = vr[i].second;
  rep.grid = {{"pole", point_json(pole)}, {"samples", samples.size()}, {"outlier_factor", opt.outlier_factor}};
  return rep;
}

/// Samples of a fundamental-solution estimate at every node inside the box
/// |x_i| <= half[i] and every snapshot with t > t0. The error budget is the
/// difference between the last two width runs plus `floor`.
inline std::vector<KernelSample> samples_from_fundamental(const FundamentalEstimate& est, const Vector& half,
                                                          double floor = 0.0) {
  const GridSolution& s = est.solution;
  require(half.size() == s.grid.dim(), "box has the wrong dimension");
  std::vector<KernelSample> out;
  const std::size_t R = est.runs.size();
  for (std::size_t k = 0; k < s.times.size(); ++k) {
    if (!(s.times[k] > est.pole.t)) continue;
    // Run snapshot 0 is the datum; the positive requested times follow.
    std::size_t pos = 0;
    for (std::size_t q = 0; q < k; ++q)
      if (s.times[q] > est.pole.t) ++pos;
    for (std::size_t p = 0; p < s.grid.size(); ++p) {
      const Vector x = s.grid.point(p);
      if (((x - est.pole.x).cwiseAbs() - half).maxCoeff() > 0.0) continue;
      double err = floor;
      if (R >= 2) err += std::abs(est.runs[R - 1].values[pos + 1][p] - est.runs[R - 2].values[pos + 1][p]);
      out.push_back({x, s.times[k], s.values[k][p], err});
    }
  }
  return out;
}

/// Occupied histogram bins as samples at time t, with budget 3 SE.
inline std::vector<KernelSample> samples_from_density(const DensityEstimate& d, double t) {
  std::vector<KernelSample> out;
  for (std::size_t f = 0; f < d.size(); ++f)
    if (d.counts[f] > 0) out.push_back({d.center(f), t, d.density[f], 3.0 * d.se[f]});
  return out;
}

// ---------------------------------------------------------------- local Harnack

inline constexpr std::size_t kMinNodes = 27;

struct HarnackOptions {
  double omega = 0.5;
  double R0 = 2.0;
  // Values below -tol count as negative.
  double tol = 0.0;
};

struct HarnackRow {
  GroupPoint center;
  double r = 0.0;
  double sup = 0.0, inf = 0.0, quotient = 0.0;
  std::size_t n_minus = 0, n_plus = 0;
  std::string status = "ok";
};

struct HarnackReport {
  double omega = 0.0, R0 = 0.0;
  GroupPoint center;
  double r = 0.0;
  double sup = 0.0, inf = 0.0, quotient = 0.0;
  bool infinite = false;
  std::size_t n_minus = 0, n_plus = 0;
  GroupPoint argsup, arginf;
  std::vector<HarnackRow> rows;  // sweep mode
  double fitted_C = 0.0;         // largest finite quotient over resolved rows

  json to_json() const {
    json r = json::array();
    for (const auto& row : rows)
      r.push_back({{"center", point_json(row.center)},
                   {"r", row.r},
                   {"sup", row.sup},
                   {"inf", row.inf},
                   {"quotient", std::isfinite(row.quotient) ? json(row.quotient) : json("inf")},
                   {"n_minus", row.n_minus},
                   {"n_plus", row.n_plus},
                   {"status", row.status}});
    return {{"omega", omega},
            {"R0", R0},
            {"center", point_json(center)},
            {"r", r},
            {"sup", sup},
            {"inf", inf},
            {"quotient", std::isfinite(quotient) ? json(quotient) : json("inf")},
            {"infinite", infinite},
            {"n_minus", n_minus},
            {"n_plus", n_plus},
            {"argsup", point_json(argsup)},
            {"arginf", point_json(arginf)},
            {"rows", r},
            {"fitted_C", fitted_C}};
  }

  /// Columns: center coordinates, t, r, sup, inf, quotient, status.
  void write_csv(std::ostream& os) const {
    const auto old = os.precision(17);
    const int N = rows.empty() ? 0 : static_cast<int>(rows.front().center.x.size());
    for (int i = 0; i < N; ++i) os << 'x' << (i + 1) << ',';
    os << "t,r,sup,inf,quotient,status\n";
    for (const auto& row : rows) {
      for (int i = 0; i < N; ++i) os << row.center.x(i) << ',';
      os << row.center.t << ',' << row.r << ',' << row.sup << ',' << row.inf << ',' << row.quotient << ',' << row.status
         << '\n';
    }
    os.precision(old);
  }
};

namespace detail {

// Which of Q_r(z0), Q-, Q+ the point z lies in: bit 0 cover, bit 1 Q-, bit 2 Q+.
inline int harnack_sets(const Group& g, const GroupPoint& z0, double r, double omega, const GroupPoint& z) {
  const GroupPoint zeta = g.dilate(1.0 / r, g.relative(z0, z));
  if (!(zeta.t > -1.0 && zeta.t <= 0.0)) return 0;
  const auto& bs = g.blocks();
  bool cover = true, inner = true;
  for (std::size_t j = 0; j < bs.blocks.size(); ++j) {
    const double n = zeta.x.segment(bs.offset(static_cast<int>(j)), bs.blocks[j]).norm();
    if (n >= 1.0) cover = false;
    if (n >= ipow(omega, 2 * static_cast<int>(j) + 1)) inner = false;
  }
  if (!cover) return 0;
  int m = 1;
  if (inner && zeta.t > -1.0 && zeta.t <= -1.0 + omega * omega) m |= 2;
  if (inner && zeta.t > -omega * omega) m |= 4;
  return m;
}

}  // namespace detail

/// sup of u over the nodes of Q- and inf over the nodes of Q+, where
/// zeta = delta_{1/r}(z0^{-1} o z) satisfies |zeta^(j)| < omega^{2j+1} and
/// zeta_t in (-1, -1 + omega^2] for Q-, zeta_t in (-omega^2, 0] for Q+.
inline HarnackRow harnack_row(const GridSolution& u, const Group& g, const GroupPoint& z0, double r,
                              const HarnackOptions& opt, GroupPoint* argsup = nullptr, GroupPoint* arginf = nullptr) {
  require(r > 0.0 && r <= opt.R0, "radius must lie in (0, R0]");
  require(opt.omega > 0.0 && opt.omega < 1.0, "omega must lie in (0, 1)");
  require(z0.x.size() == g.N() && u.grid.dim() == g.N(), "dimension mismatch");
  HarnackRow row;
  row.center = z0;
  row.r = r;
  row.sup = -std::numeric_limits<double>::infinity();
  row.inf = std::numeric_limits<double>::infinity();
  bool negative = false;
  for (std::size_t k = 0; k < u.times.size(); ++k) {
    const double zt = (u.times[k] - z0.t) / (r * r);
    if (!(zt > -1.0 && zt <= 0.0)) continue;
    for (std::size_t p = 0; p < u.grid.size(); ++p) {
      const GroupPoint z(u.grid.point(p), u.times[k]);
      const int m = detail::harnack_sets(g, z0, r, opt.omega, z);
      if (!m) continue;
      const double v = u.values[k][p];
      if (v < -opt.tol || !std::isfinite(v)) negative = true;
      if (m & 2) {
        ++row.n_minus;
        if (v > row.sup) {
          row.sup = v;
          if (argsup) *argsup = z;
        }
      }
      if (m & 4) {
        ++row.n_plus;
        if (v < row.inf) {
          row.inf = v;
          if (arginf) *arginf = z;
        }
      }
    }
  }
  if (negative) {
    row.status = "NotNonnegative";
  } else if (row.n_minus < kMinNodes || row.n_plus < kMinNodes) {
    row.status = "CylinderUnresolved";
  } else {
    row.quotient = row.inf > 0.0 ? row.sup / row.inf : std::numeric_limits<double>::infinity();
    if (!(row.inf > 0.0)) row.status = "infinite";
  }
  return row;
}

inline HarnackReport harnack_local(const GridSolution& u, const Group& g, const GroupPoint& z0, double r,
                                   HarnackOptions opt = {}) {
  HarnackReport rep;
  rep.omega = opt.omega;
  rep.R0 = opt.R0;
  rep.center = z0;
  rep.r = r;
  const HarnackRow row = harnack_row(u, g, z0, r, opt, &rep.argsup, &rep.arginf);
  if (row.status == "NotNonnegative") fail(Errc::not_nonnegative, "u is negative on the covering cylinder");
  if (row.status == "CylinderUnresolved")
    fail(Errc::cylinder_unresolved, "Q- has " + std::to_string(row.n_minus) + " nodes and Q+ has " +
                                        std::to_string(row.n_plus) + "; at least 27 each are required");
  rep.sup = row.sup;
  rep.inf = row.inf;
  rep.quotient = row.quotient;
  rep.infinite = !std::isfinite(row.quotient);
  rep.n_minus = row.n_minus;
  rep.n_plus = row.n_plus;
  rep.fitted_C = rep.infinite ? 0.0 : rep.quotient;
  rep.rows.push_back(row);
  return rep;
}

/// Every (center, radius) pair; unresolved or failing entries are recorded
/// with their status rather than thrown. Rows keep the input order.
inline HarnackReport harnack_sweep(const GridSolution& u, const Group& g, const std::vector<GroupPoint>& centers,
                                   const std::vector<double>& radii, HarnackOptions opt = {}, int threads = 0) {
  HarnackReport rep;
  rep.omega = opt.omega;
  rep.R0 = opt.R0;
  const std::size_t n = centers.size() * radii.size();
  rep.rows.resize(n);
  parallel_for(n, threads, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i)
      rep.rows[i] = harnack_row(u, g, centers[i / radii.size()], radii[i % radii.size()], opt);
  }, 2);
  for (const auto& row : rep.rows)
    if (row.status == "ok") rep.fitted_C = std::max(rep.fitted_C, row.quotient);
  return rep;
}

// ---------------------------------------------------------------- cone Harnack

struct ConeReport {
  double sup = 0.0, value = 0.0, ratio = 0.0;
  std::size_t nodes = 0;
  GroupPoint argsup;
  bool holds = true;  // sup <= C_probe u(z); true when no probe is given

  json to_json() const {
    return {{"sup", sup}, {"u_vertex", value}, {"ratio", ratio}, {"nodes", nodes}, {"argsup", point_json(argsup)}, {"holds", holds}};
  }
};

/// Discrete sup of u over P_{1, omega, R/R0}(z) and its ratio to u(z). The
/// cone lies in the future of its vertex.
inline ConeReport harnack_cone(const GridSolution& u, const Group& g, const GroupPoint& z, double R,
                               HarnackOptions opt = {}, double C_probe = 0.0) {
  require(R > 0.0 && opt.R0 > 0.0 && opt.omega > 0.0, "cone parameters must be positive");
  ConeReport rep;
  rep.value = u.interpolate(z.x, z.t);
  if (!(rep.value > 0.0)) fail(Errc::invalid_argument, "u must be positive at the vertex");
  const Cone P{z, 1.0, opt.omega, R / opt.R0};
  rep.sup = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < u.times.size(); ++k) {
    if (!(u.times[k] > z.t)) continue;
    for (std::size_t p = 0; p < u.grid.size(); ++p) {
      const GroupPoint w(u.grid.point(p), u.times[k]);
      if (!g.cone_contains(P, w)) continue;
      ++rep.nodes;
      if (u.values[k][p] > rep.sup) rep.sup = u.values[k][p], rep.argsup = w;
    }
  }
  if (rep.nodes < kMinNodes)
    fail(Errc::cone_unresolved, "cone holds " + std::to_string(rep.nodes) + " nodes; at least 27 are required");
  rep.ratio = rep.sup / rep.value;
  if (C_probe > 0.0) rep.holds = rep.sup <= C_probe * rep.value;
  return rep;
}

// ---------------------------------------------------------------- global Harnack

struct GlobalEntry {
  GroupPoint z;
  double ratio = 0.0;  // u(xi, t) / u(x, t0)
  double q = 0.0;      // <C^{-1}(t - t0) w, w>, w = xi - e^{(t - t0) B} x
  double c0 = 0.0;
};

struct GlobalReport {
  std::vector<GlobalEntry> entries;
  double max_c0 = 0.0;

  json to_json() const {
    json e = json::array();
    for (const auto& x : entries)
      e.push_back({{"point", point_json(x.z)}, {"ratio", x.ratio}, {"q", x.q}, {"c0", std::isfinite(x.c0) ? json(x.c0) : json("inf")}});
    return {{"entries", e}, {"max_c0", std::isfinite(max_c0) ? json(max_c0) : json("inf")}};
  }
};

/// Smallest c0 >= 1 with c0 exp(c0 q) >= ratio; the left side increases in c0.
inline double smallest_c0(double ratio, double q) {
  require(q >= 0.0, "q must be non-negative");
  if (!(ratio > 1.0) || ratio <= std::exp(q)) return 1.0;
  if (!std::isfinite(ratio)) return std::numeric_limits<double>::infinity();
  if (q == 0.0) return ratio;
  const double target = std::log(ratio);
  auto f = [&](double c) { return std::log(c) + c * q - target; };
  double lo = 1.0, hi = 2.0;
  while (f(hi) < 0.0) lo = hi, hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-14 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return hi;
}

/// For every (xi, t) with t > t0: the smallest c0 >= 1 satisfying
/// u(xi, t) <= c0 exp(c0 <C^{-1}(t - t0) w, w>) u(x, t0), with
/// w = xi - e^{(t - t0) B} x and C built from the identity diffusion block.
inline GlobalReport harnack_global(const ScalarFn& u, const Group& g, const Vector& x, double t0,
                                   const std::vector<GroupPoint>& points) {
  const double base = u(x, t0);
  if (!(base > 0.0)) fail(Errc::invalid_argument, "u must be positive at (x, t0)");
  const int m0 = g.blocks().m0();
  const Matrix I = Matrix::Identity(m0, m0);
  GlobalReport rep;
  for (const auto& z : points) {
    if (!(z.t > t0)) continue;
    const double tau = z.t - t0;
    const Vector w = z.x - g.exp_B(tau) * x;
    GlobalEntry e;
    e.z = z;
    e.ratio = u(z.x, z.t) / base;
    e.q = covariance(tau, g, I).quad_form(w);
    e.c0 = smallest_c0(e.ratio, e.q);
    rep.max_c0 = std::max(rep.max_c0, e.c0);
    rep.entries.push_back(e);
  }
  return rep;
}

inline ScalarFn as_function(const GridSolution& u) {
  return [&u](const Vector& x, double t) { return u.interpolate(x, t); };
}

}  // namespace kolmo
