#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kolmo/coefficients.hpp"
#include "kolmo/error.hpp"
#include "kolmo/group.hpp"
#include "kolmo/kernel.hpp"
#include "kolmo/parallel.hpp"
#include "kolmo/spec.hpp"

namespace kolmo {

// ---------------------------------------------------------------- grids

/// Uniform tensor grid on [lo, hi] with n[i] nodes per axis (endpoints
/// included). Flat indices are row-major: the last axis varies fastest.
struct Grid {
  Vector lo, hi;
  std::vector<int> n;

  Grid() = default;
  Grid(Vector lo_, Vector hi_, std::vector<int> n_) : lo(std::move(lo_)), hi(std::move(hi_)), n(std::move(n_)) {
    require(lo.size() == hi.size() && static_cast<std::size_t>(lo.size()) == n.size() && !n.empty(),
            "grid bounds and node counts must agree");
    for (int i = 0; i < dim(); ++i) require(n[i] >= 3 && hi(i) > lo(i), "grid axes need >= 3 nodes and lo < hi");
  }

  /// Grid with spacing close to h[i] on [lo, hi], node count rounded up.
  static Grid with_spacing(const Vector& lo, const Vector& hi, const std::vector<double>& h) {
    std::vector<int> n(static_cast<std::size_t>(lo.size()));
    for (Eigen::Index i = 0; i < lo.size(); ++i)
      n[static_cast<std::size_t>(i)] = static_cast<int>(std::ceil((hi(i) - lo(i)) / h[static_cast<std::size_t>(i)] - 1e-9)) + 1;
    return {lo, hi, n};
  }

  int dim() const { return static_cast<int>(n.size()); }
  double h(int i) const { return (hi(i) - lo(i)) / (n[static_cast<std::size_t>(i)] - 1); }
  double coord(int i, int k) const { return lo(i) + h(i) * k; }
  std::size_t size() const {
    std::size_t s = 1;
    for (int k : n) s *= static_cast<std::size_t>(k);
    return s;
  }
  std::size_t stride(int i) const {
    std::size_t s = 1;
    for (int k = dim() - 1; k > i; --k) s *= static_cast<std::size_t>(n[static_cast<std::size_t>(k)]);
    return s;
  }
  std::size_t flat(const std::vector<int>& idx) const {
    std::size_t f = 0;
    for (int i = 0; i < dim(); ++i) f = f * static_cast<std::size_t>(n[static_cast<std::size_t>(i)]) + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]);
    return f;
  }
  std::vector<int> unflat(std::size_t f) const {
    std::vector<int> idx(n.size());
    for (int i = dim() - 1; i >= 0; --i) {
      idx[static_cast<std::size_t>(i)] = static_cast<int>(f % static_cast<std::size_t>(n[static_cast<std::size_t>(i)]));
      f /= static_cast<std::size_t>(n[static_cast<std::size_t>(i)]);
    }
    return idx;
  }
  Vector point(const std::vector<int>& idx) const {
    Vector x(dim());
    for (int i = 0; i < dim(); ++i) x(i) = coord(i, idx[static_cast<std::size_t>(i)]);
    return x;
  }
  Vector point(std::size_t f) const { return point(unflat(f)); }
  bool interior(const std::vector<int>& idx) const {
    for (int i = 0; i < dim(); ++i)
      if (idx[static_cast<std::size_t>(i)] < 1 || idx[static_cast<std::size_t>(i)] > n[static_cast<std::size_t>(i)] - 2) return false;
    return true;
  }
  bool on_boundary(const std::vector<int>& idx) const {
    for (int i = 0; i < dim(); ++i)
      if (idx[static_cast<std::size_t>(i)] == 0 || idx[static_cast<std::size_t>(i)] == n[static_cast<std::size_t>(i)] - 1) return true;
    return false;
  }
  double cell_volume() const {
    double v = 1.0;
    for (int i = 0; i < dim(); ++i) v *= h(i);
    return v;
  }
  bool contains(const Vector& x) const {
    for (int i = 0; i < dim(); ++i)
      if (!(x(i) >= lo(i) && x(i) <= hi(i))) return false;
    return true;
  }
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// Snapshots u(., t_k) on a spatial grid, with the metadata needed to
/// reproduce them.
struct GridSolution {
  Grid grid;
  std::vector<double> times;
  std::vector<std::vector<double>> values;  // values[k][flat]
  json spec = json::object();
  std::string spec_hash;
  json stability = json::object();
  json config = json::object();  // resolved command configuration, if any
  std::vector<std::string> warnings;

  std::size_t snapshots() const { return times.size(); }

  /// Multilinear in space, linear in time; OutOfDomain outside the grid.
  double interpolate(const Vector& x, double t) const {
    require(x.size() == grid.dim(), "point dimension does not match the grid");
    if (times.empty() || !(t >= times.front() && t <= times.back()) || !grid.contains(x))
      fail(Errc::out_of_domain, "point outside the stored solution");
    std::size_t k = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
    k = k == 0 ? 0 : k - 1;
    if (k + 1 >= times.size()) k = times.size() >= 2 ? times.size() - 2 : 0;
    const double wt = times.size() < 2 ? 0.0 : (t - times[k]) / (times[k + 1] - times[k]);
    const double a = spatial(k, x);
    if (times.size() < 2 || wt == 0.0) return a;
    return (1.0 - wt) * a + wt * spatial(k + 1, x);
  }

  double spatial(std::size_t k, const Vector& x) const {
    const int d = grid.dim();
    std::vector<int> base(static_cast<std::size_t>(d));
    std::vector<double> frac(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
      const double q = (x(i) - grid.lo(i)) / grid.h(i);
      int b = static_cast<int>(std::floor(q));
      b = std::clamp(b, 0, grid.n[static_cast<std::size_t>(i)] - 2);
      base[static_cast<std::size_t>(i)] = b;
      frac[static_cast<std::size_t>(i)] = q - b;
    }
    double acc = 0.0;
    std::vector<int> idx(static_cast<std::size_t>(d));
    for (std::size_t corner = 0; corner < (std::size_t{1} << d); ++corner) {
      double w = 1.0;
      for (int i = 0; i < d; ++i) {
        const bool up = (corner >> i) & 1u;
        idx[static_cast<std::size_t>(i)] = base[static_cast<std::size_t>(i)] + (up ? 1 : 0);
        w *= up ? frac[static_cast<std::size_t>(i)] : 1.0 - frac[static_cast<std::size_t>(i)];
      }
      if (w != 0.0) acc += w * values[k][grid.flat(idx)];
    }
    return acc;
  }

  json metadata() const {
    json axes = json::array();
    for (int i = 0; i < grid.dim(); ++i) axes.push_back({{"lo", grid.lo(i)}, {"hi", grid.hi(i)}, {"n", grid.n[static_cast<std::size_t>(i)]}});
    return {{"format", "kolmo.grid_solution/1"},
            {"axes", axes},
            {"times", times},
            {"spec", spec},
            {"spec_hash", spec_hash},
            {"stability", stability},
            {"config", config},
            {"warnings", warnings},
            {"layout", "float64 little-endian, snapshot-major then row-major nodes (last axis fastest)"}};
  }

  /// Writes `<prefix>.json` and `<prefix>.bin`.
  void save(const std::string& prefix) const {
    {
      std::ofstream m(prefix + ".json");
      if (!m) fail(Errc::invalid_argument, "cannot write '" + prefix + ".json'");
      m << metadata().dump(2) << '\n';
    }
    std::ofstream b(prefix + ".bin", std::ios::binary);
    if (!b) fail(Errc::invalid_argument, "cannot write '" + prefix + ".bin'");
    for (const auto& v : values) b.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }

  static GridSolution load(const std::string& prefix) {
    std::ifstream m(prefix + ".json");
    if (!m) fail(Errc::parse_error, "cannot open '" + prefix + ".json'");
    json j;
    try {
      m >> j;
    } catch (const json::exception& e) {
      fail(Errc::parse_error, e.what());
    }
    GridSolution s;
    const auto& axes = j.at("axes");
    Vector lo(static_cast<Eigen::Index>(axes.size())), hi(static_cast<Eigen::Index>(axes.size()));
    std::vector<int> n;
    for (std::size_t i = 0; i < axes.size(); ++i) {
      lo(static_cast<Eigen::Index>(i)) = axes[i].at("lo").get<double>();
      hi(static_cast<Eigen::Index>(i)) = axes[i].at("hi").get<double>();
      n.push_back(axes[i].at("n").get<int>());
    }
    s.grid = Grid(lo, hi, n);
    s.times = j.at("times").get<std::vector<double>>();
    s.spec = j.value("spec", json::object());
    s.spec_hash = j.value("spec_hash", std::string{});
    s.stability = j.value("stability", json::object());
    s.config = j.value("config", json::object());
    s.warnings = j.value("warnings", std::vector<std::string>{});
    std::ifstream b(prefix + ".bin", std::ios::binary);
    if (!b) fail(Errc::parse_error, "cannot open '" + prefix + ".bin'");
    s.values.assign(s.times.size(), std::vector<double>(s.grid.size()));
    for (auto& v : s.values)
      if (!b.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
        fail(Errc::parse_error, "binary payload is truncated");
    return s;
  }

  /// Columns x1..xN, t, u; 17 significant digits.
  void write_csv(std::ostream& os) const {
    for (int i = 0; i < grid.dim(); ++i) os << 'x' << (i + 1) << ',';
    os << "t,u\n";
    for (std::size_t k = 0; k < times.size(); ++k)
      for (std::size_t f = 0; f < grid.size(); ++f) {
        const Vector x = grid.point(f);
        for (int i = 0; i < grid.dim(); ++i) os << format_double(x(i)) << ',';
        os << format_double(times[k]) << ',' << format_double(values[k][f]) << '\n';
      }
  }
};

/// Samples f(x, t) at every node of `grid` for each time.
template <class F>
GridSolution sample_on_grid(const Grid& grid, const std::vector<double>& times, F&& f) {
  GridSolution s;
  s.grid = grid;
  s.times = times;
  s.values.assign(times.size(), std::vector<double>(grid.size()));
  for (std::size_t k = 0; k < times.size(); ++k)
    for (std::size_t p = 0; p < grid.size(); ++p) s.values[k][p] = f(grid.point(p), times[k]);
  return s;
}

// ---------------------------------------------------------------- discrete operators

namespace detail {

struct NodeView {
  const GridSolution& u;
  std::size_t k;
  std::size_t f;
  double at(int axis, int off) const {
    return u.values[k][static_cast<std::size_t>(static_cast<long long>(f) + off * static_cast<long long>(u.grid.stride(axis)))];
  }
  double at2(int a, int oa, int b, int ob) const {
    const long long s = oa * static_cast<long long>(u.grid.stride(a)) + ob * static_cast<long long>(u.grid.stride(b));
    return u.values[k][static_cast<std::size_t>(static_cast<long long>(f) + s)];
  }
};

inline Vector shifted(const Vector& x, int axis, double d) {
  Vector y = x;
  y(axis) += d;
  return y;
}

// div(A D u) at a node, flux form. Diagonal terms use face averages of A;
// mixed terms are central differences of A_ij D_j u.
inline double divergence_term(const GridSolution& u, const Field& A0, int m0, std::size_t k, std::size_t f) {
  const Grid& g = u.grid;
  const double t = u.times[k];
  const Vector x = g.point(f);
  const NodeView v{u, k, f};
  const Matrix Ac = A0(x, t);
  double acc = 0.0;
  for (int i = 0; i < m0; ++i) {
    const double h = g.h(i);
    const Matrix Ap = A0(shifted(x, i, h), t), Am = A0(shifted(x, i, -h), t);
    const double ap = 0.5 * (Ac(i, i) + Ap(i, i)), am = 0.5 * (Ac(i, i) + Am(i, i));
    acc += (ap * (v.at(i, 1) - v.at(i, 0)) - am * (v.at(i, 0) - v.at(i, -1))) / (h * h);
    for (int j = 0; j < m0; ++j) {
      if (j == i) continue;
      const double hj = g.h(j);
      const double dp = (v.at2(i, 1, j, 1) - v.at2(i, 1, j, -1)) / (2 * hj);
      const double dm = (v.at2(i, -1, j, 1) - v.at2(i, -1, j, -1)) / (2 * hj);
      acc += (Ap(i, j) * dp - Am(i, j) * dm) / (2 * h);
    }
  }
  return acc;
}

inline void require_node(const Grid& g, const std::vector<int>& idx) {
  require(static_cast<int>(idx.size()) == g.dim(), "node index has the wrong dimension");
  if (!g.interior(idx)) fail(Errc::boundary_node, "node is not interior");
}

}  // namespace detail

/// (L u)(z) at node `idx` of snapshot k:
///   div(A D u) + <Bx, D u> + <b, D u> + c u - div(a u) - d_t u.
/// Transport is upwind (forward difference where (Bx)_i > 0), b and a use
/// central differences, d_t the forward difference to snapshot k + 1.
inline double apply_L(const GridSolution& u, const OperatorSpec& spec, std::size_t k, const std::vector<int>& idx) {
  const Grid& g = u.grid;
  detail::require_node(g, idx);
  if (k + 1 >= u.snapshots()) fail(Errc::boundary_node, "forward time difference needs a later snapshot");
  const std::size_t f = g.flat(idx);
  const detail::NodeView v{u, k, f};
  const Vector x = g.point(idx);
  const double t = u.times[k];
  const int m0 = spec.m0();
  double acc = detail::divergence_term(u, spec.coeffs.A0, m0, k, f);
  const Vector Bx = spec.B * x;
  for (int i = 0; i < g.dim(); ++i) {
    if (Bx(i) == 0.0) continue;
    const double d = Bx(i) > 0.0 ? v.at(i, 1) - v.at(i, 0) : v.at(i, 0) - v.at(i, -1);
    acc += Bx(i) * d / g.h(i);
  }
  if (spec.coeffs.b) {
    const Matrix b = spec.coeffs.b(x, t);
    for (int i = 0; i < m0; ++i) acc += b(i, 0) * (v.at(i, 1) - v.at(i, -1)) / (2 * g.h(i));
  }
  if (spec.coeffs.a) {
    for (int i = 0; i < m0; ++i) {
      const double ap = spec.coeffs.a(detail::shifted(x, i, g.h(i)), t)(i, 0);
      const double am = spec.coeffs.a(detail::shifted(x, i, -g.h(i)), t)(i, 0);
      acc -= (ap * v.at(i, 1) - am * v.at(i, -1)) / (2 * g.h(i));
    }
  }
  if (spec.coeffs.c) acc += spec.coeffs.c.scalar(x, t) * v.at(0, 0);
  acc -= (u.values[k + 1][f] - u.values[k][f]) / (u.times[k + 1] - u.times[k]);
  return acc;
}

/// (L* v)(z) = div(A D v) - div(b v) + <a, D v> + (c - tr B) v - <Bx, D v> + d_t v,
/// discretised as the transpose of apply_L: backward differences where
/// (Bx)_i > 0 and the backward time difference from snapshot k - 1.
inline double apply_L_adjoint(const GridSolution& u, const OperatorSpec& spec, std::size_t k,
                              const std::vector<int>& idx) {
  const Grid& g = u.grid;
  detail::require_node(g, idx);
  if (k == 0 || k >= u.snapshots()) fail(Errc::boundary_node, "backward time difference needs an earlier snapshot");
  const std::size_t f = g.flat(idx);
  const detail::NodeView v{u, k, f};
  const Vector x = g.point(idx);
  const double t = u.times[k];
  const int m0 = spec.m0();
  double acc = detail::divergence_term(u, spec.coeffs.A0, m0, k, f);
  const Vector Bx = spec.B * x;
  for (int i = 0; i < g.dim(); ++i) {
    if (Bx(i) == 0.0) continue;
    const double d = Bx(i) > 0.0 ? v.at(i, 0) - v.at(i, -1) : v.at(i, 1) - v.at(i, 0);
    acc -= Bx(i) * d / g.h(i);
  }
  if (spec.coeffs.b) {
    for (int i = 0; i < m0; ++i) {
      const double bp = spec.coeffs.b(detail::shifted(x, i, g.h(i)), t)(i, 0);
      const double bm = spec.coeffs.b(detail::shifted(x, i, -g.h(i)), t)(i, 0);
      acc -= (bp * v.at(i, 1) - bm * v.at(i, -1)) / (2 * g.h(i));
    }
  }
  if (spec.coeffs.a) {
    const Matrix a = spec.coeffs.a(x, t);
    for (int i = 0; i < m0; ++i) acc += a(i, 0) * (v.at(i, 1) - v.at(i, -1)) / (2 * g.h(i));
  }
  const double c = spec.coeffs.c ? spec.coeffs.c.scalar(x, t) : 0.0;
  acc += (c - spec.B.trace()) * v.at(0, 0);
  acc += (u.values[k][f] - u.values[k - 1][f]) / (u.times[k] - u.times[k - 1]);
  return acc;
}

/// Default step for lie_derivative: half the smaller of the finest spatial
/// spacing and the finest snapshot spacing.
inline double default_lie_step(const GridSolution& u) {
  double s = std::numeric_limits<double>::infinity();
  for (int i = 0; i < u.grid.dim(); ++i) s = std::min(s, u.grid.h(i));
  for (std::size_t k = 1; k < u.times.size(); ++k) s = std::min(s, u.times[k] - u.times[k - 1]);
  return 0.5 * s;
}

/// Y u(x, t) = d/ds u(gamma(s)) at s = 0, gamma(s) = (E(-s) x, t - s), as the
/// centred difference (u(gamma(s)) - u(gamma(-s))) / (2s).
inline double lie_derivative(const GridSolution& u, const Group& g, const Vector& x, double t, double s = 0.0) {
  if (s <= 0.0) s = default_lie_step(u);
  const double fwd = u.interpolate(g.exp_drift(-s) * x, t - s);
  const double bwd = u.interpolate(g.exp_drift(s) * x, t + s);
  return (fwd - bwd) / (2.0 * s);
}

// ---------------------------------------------------------------- Cauchy solver

enum class FarField { zero, clamp };
enum class Interpolation { linear, cubic };
enum class BoxCheck { off, warn, error };

inline std::string to_string(FarField f) { return f == FarField::zero ? "zero" : "clamp"; }
inline std::string to_string(Interpolation i) { return i == Interpolation::linear ? "linear" : "cubic"; }

struct SolveOptions {
  double dt = 0.0;                 // 0: the stability bound
  std::vector<double> save_times;  // empty: only the final time
  FarField far_field = FarField::zero;
  Interpolation interpolation = Interpolation::cubic;
  BoxCheck box_check = BoxCheck::warn;
  double box_tol = 1e-12;
  int threads = 0;
  Field source;  // optional scalar f: d_t u = ... + f
};

namespace detail {

// Lagrange weights on nodes b-1..b+2 at b + th.
inline std::array<double, 4> cubic_weights(double th) {
  return {-th * (th - 1) * (th - 2) / 6.0, (th + 1) * (th - 1) * (th - 2) / 2.0, -(th + 1) * th * (th - 2) / 2.0,
          (th + 1) * th * (th - 1) / 6.0};
}

struct AxisStencil {
  int count = 0;
  std::array<int, 4> node{};
  std::array<double, 4> w{};
  int lo = 0, hi = 0;  // bracketing nodes for the limiter
  bool outside = false;
};

inline AxisStencil axis_stencil(double q, int n, Interpolation interp, FarField ff) {
  AxisStencil s;
  const double tol = 1e-12;
  if (ff == FarField::zero && (q < -tol || q > n - 1 + tol)) {
    s.outside = true;
    return s;
  }
  q = std::clamp(q, 0.0, static_cast<double>(n - 1));
  int b = static_cast<int>(std::floor(q));
  if (b >= n - 1) b = n - 2;
  const double th = q - b;
  s.lo = b;
  s.hi = b + 1;
  if (th <= tol) {
    s.count = 1;
    s.node[0] = b;
    s.w[0] = 1.0;
    s.lo = s.hi = b;
    return s;
  }
  if (th >= 1.0 - tol) {
    s.count = 1;
    s.node[0] = b + 1;
    s.w[0] = 1.0;
    s.lo = s.hi = b + 1;
    return s;
  }
  if (interp == Interpolation::linear) {
    s.count = 2;
    s.node = {b, b + 1, 0, 0};
    s.w = {1.0 - th, th, 0.0, 0.0};
    return s;
  }
  s.count = 4;
  const auto w = cubic_weights(th);
  for (int j = 0; j < 4; ++j) {
    s.node[static_cast<std::size_t>(j)] = b - 1 + j;
    s.w[static_cast<std::size_t>(j)] = w[static_cast<std::size_t>(j)];
  }
  return s;
}

// Value of node index `m` on an axis, honouring the far-field rule; -1 marks
// a node outside the grid in zero mode.
inline int far_index(int m, int n, FarField ff) {
  if (m >= 0 && m < n) return m;
  return ff == FarField::clamp ? std::clamp(m, 0, n - 1) : -1;
}

}  // namespace detail

/// Evolves d_t u = div(A D u) + <Bx, D u> + <b, D u> + c u - div(a u) [+ f]
/// from u(., t0) = phi to t1 with first-order splitting per step:
///   (i)   semi-Lagrangian transport u(x) <- u(e^{dt B} x); cubic
///         interpolation clipped to the bracketing node values (monotone),
///         or multilinear;
///   (ii)  explicit flux-form diffusion in the first block with A at t_n;
///   (iii) upwind b and a advection, source, then u <- exp(dt c) u.
/// The step respects dt <= 1 / (2 Lambda sum_{i<m0} h_i^-2) and an advection
/// Courant number <= 0.9; the record is stored in `stability`.
inline GridSolution solve_cauchy(const OperatorSpec& spec, const Field& phi, const Grid& grid, double t0, double t1,
                                 SolveOptions opt = {}) {
  const int N = spec.N(), m0 = spec.m0();
  require(grid.dim() == N, "grid dimension must equal N");
  require(t1 > t0, "t1 must exceed t0");
  const Group g = spec.group();
  const std::size_t P = grid.size();
  const auto un = static_cast<std::size_t>(N), um = static_cast<std::size_t>(m0);

  std::vector<double> saves = opt.save_times;
  std::sort(saves.begin(), saves.end());
  saves.erase(std::unique(saves.begin(), saves.end()), saves.end());
  for (double s : saves) require(s > t0 && s <= t1, "save times must lie in (t0, t1]");
  if (saves.empty() || saves.back() != t1) saves.push_back(t1);

  std::vector<int> nn = grid.n;
  std::vector<long long> stride(un);
  std::vector<std::vector<double>> axis(un);
  for (int i = 0; i < N; ++i) {
    stride[static_cast<std::size_t>(i)] = static_cast<long long>(grid.stride(i));
    for (int k = 0; k < nn[static_cast<std::size_t>(i)]; ++k) axis[static_cast<std::size_t>(i)].push_back(grid.coord(i, k));
  }
  auto advance = [&](std::vector<int>& idx) {
    for (int i = N - 1; i >= 0; --i) {
      if (++idx[static_cast<std::size_t>(i)] < nn[static_cast<std::size_t>(i)]) return;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  };
  auto fill_point = [&](const std::vector<int>& idx, Vector& x) {
    for (int i = 0; i < N; ++i) x(i) = axis[static_cast<std::size_t>(i)][static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
  };

  // Coefficient samples, flat. Time-independent fields are sampled once.
  const bool has_b = static_cast<bool>(spec.coeffs.b), has_a = static_cast<bool>(spec.coeffs.a),
             has_c = static_cast<bool>(spec.coeffs.c), has_f = static_cast<bool>(opt.source);
  std::vector<double> Av(P * um * um), bv(has_b ? P * um : 0), av(has_a ? P * um : 0), cv(has_c ? P : 0),
      fv(has_f ? P : 0);
  auto sample = [&](double t, bool first) {
    const bool any = first || spec.coeffs.A0.time_dependent() || (has_b && spec.coeffs.b.time_dependent()) ||
                     (has_a && spec.coeffs.a.time_dependent()) || (has_c && spec.coeffs.c.time_dependent()) ||
                     (has_f && opt.source.time_dependent());
    if (!any) return;
    parallel_for(P, opt.threads, [&](std::size_t b, std::size_t e) {
      std::vector<int> idx = grid.unflat(b);
      Vector x(N);
      for (std::size_t p = b; p < e; ++p, advance(idx)) {
        fill_point(idx, x);
        if (first || spec.coeffs.A0.time_dependent()) {
          const Matrix A = spec.coeffs.A0(x, t);
          for (std::size_t i = 0; i < um; ++i)
            for (std::size_t j = 0; j < um; ++j) Av[(p * um + i) * um + j] = A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
        if (has_b && (first || spec.coeffs.b.time_dependent())) {
          const Matrix v = spec.coeffs.b(x, t);
          for (std::size_t i = 0; i < um; ++i) bv[p * um + i] = v(static_cast<Eigen::Index>(i), 0);
        }
        if (has_a && (first || spec.coeffs.a.time_dependent())) {
          const Matrix v = spec.coeffs.a(x, t);
          for (std::size_t i = 0; i < um; ++i) av[p * um + i] = v(static_cast<Eigen::Index>(i), 0);
        }
        if (has_c && (first || spec.coeffs.c.time_dependent())) cv[p] = spec.coeffs.c.scalar(x, t);
        if (has_f && (first || opt.source.time_dependent())) fv[p] = opt.source.scalar(x, t);
      }
    });
  };
  sample(t0, true);

  // Stability bound.
  double inv_h2 = 0.0;
  for (int i = 0; i < m0; ++i) inv_h2 += 1.0 / (grid.h(i) * grid.h(i));
  const double diff_bound = 1.0 / (2.0 * spec.Lambda * inv_h2);
  double adv = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < um; ++i) {
      if (has_b) s += std::abs(bv[p * um + i]) / grid.h(static_cast<int>(i));
      if (has_a) s += 2.0 * std::abs(av[p * um + i]) / grid.h(static_cast<int>(i));
    }
    adv = std::max(adv, s);
  }
  const double adv_bound = adv > 0.0 ? 0.9 / adv : std::numeric_limits<double>::infinity();
  const double bound = std::min(diff_bound, adv_bound);
  if (opt.dt > bound * (1.0 + 1e-12))
    fail(Errc::unstable, "dt = " + format_double(opt.dt) + " exceeds the stability bound " + format_double(bound));
  const double dt_max = opt.dt > 0.0 ? opt.dt : bound;

  GridSolution sol;
  sol.grid = grid;
  sol.spec = to_json(spec);
  sol.spec_hash = spec_hash(spec);
  sol.times.push_back(t0);
  std::vector<double> u(P), w(P);
  {
    std::vector<int> idx(un, 0);
    Vector x(N);
    for (std::size_t p = 0; p < P; ++p, advance(idx)) {
      fill_point(idx, x);
      u[p] = phi.scalar(x, t0);
    }
  }
  sol.values.push_back(u);

  const FarField ff = opt.far_field;
  // Neighbour value along one axis with the far-field rule applied.
  auto nb = [&](const std::vector<double>& arr, std::size_t p, int i, int ii, int off) -> double {
    const int m = detail::far_index(ii + off, nn[static_cast<std::size_t>(i)], ff);
    if (m < 0) return 0.0;
    return arr[static_cast<std::size_t>(static_cast<long long>(p) + (m - ii) * stride[static_cast<std::size_t>(i)])];
  };

  double t = t0;
  std::size_t steps = 0;
  double max_transport_courant = 0.0;
  double dt_used_min = std::numeric_limits<double>::infinity();
  for (double target : saves) {
    const double interval = target - t;
    const std::size_t nsteps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(interval / dt_max * (1.0 - 1e-12))));
    const double dt = interval / static_cast<double>(nsteps);
    dt_used_min = std::min(dt_used_min, dt);
    const Matrix M = g.exp_B(dt);
    // Axes whose departure coordinate differs from the node.
    std::vector<int> moving;
    for (int i = 0; i < N; ++i) {
      bool id = true;
      for (int j = 0; j < N; ++j)
        if (M(i, j) != (i == j ? 1.0 : 0.0)) id = false;
      if (!id) moving.push_back(i);
    }
    for (std::size_t st = 0; st < nsteps; ++st) {
      // (i) transport
      if (moving.empty()) {
        w = u;
      } else {
        parallel_for(P, opt.threads, [&](std::size_t b, std::size_t e) {
          std::vector<int> idx = grid.unflat(b), corner_idx(un), c(moving.size());
          std::vector<detail::AxisStencil> sten(moving.size());
          for (std::size_t p = b; p < e; ++p, advance(idx)) {
            bool outside = false;
            for (std::size_t a = 0; a < moving.size(); ++a) {
              const int i = moving[a];
              double y = 0.0;
              for (int j = 0; j < N; ++j) y += M(i, j) * axis[static_cast<std::size_t>(j)][static_cast<std::size_t>(idx[static_cast<std::size_t>(j)])];
              const double q = (y - grid.lo(i)) / grid.h(i);
              sten[a] = detail::axis_stencil(q, nn[static_cast<std::size_t>(i)], opt.interpolation, ff);
              outside = outside || sten[a].outside;
            }
            if (outside) {
              w[p] = 0.0;
              continue;
            }
            // Offsets are relative to the node itself along the moving axes.
            double acc = 0.0;
            std::fill(c.begin(), c.end(), 0);
            while (true) {
              double wt = 1.0;
              long long off = 0;
              bool missing = false;
              for (std::size_t a = 0; a < moving.size(); ++a) {
                const int i = moving[a];
                const auto& s = sten[a];
                const int m = detail::far_index(s.node[static_cast<std::size_t>(c[a])], nn[static_cast<std::size_t>(i)], ff);
                if (m < 0) {
                  missing = true;
                  break;
                }
                off += (m - idx[static_cast<std::size_t>(i)]) * stride[static_cast<std::size_t>(i)];
                wt *= s.w[static_cast<std::size_t>(c[a])];
              }
              if (!missing) acc += wt * u[static_cast<std::size_t>(static_cast<long long>(p) + off)];
              std::size_t a = 0;
              while (a < moving.size() && ++c[a] == sten[a].count) c[a++] = 0;
              if (a == moving.size()) break;
            }
            if (opt.interpolation == Interpolation::cubic) {
              double lo = std::numeric_limits<double>::infinity(), hi = -lo;
              for (std::size_t corner = 0; corner < (std::size_t{1} << moving.size()); ++corner) {
                long long off = 0;
                for (std::size_t a = 0; a < moving.size(); ++a) {
                  const int i = moving[a];
                  const int m = ((corner >> a) & 1u) ? sten[a].hi : sten[a].lo;
                  off += (m - idx[static_cast<std::size_t>(i)]) * stride[static_cast<std::size_t>(i)];
                }
                const double v = u[static_cast<std::size_t>(static_cast<long long>(p) + off)];
                lo = std::min(lo, v);
                hi = std::max(hi, v);
              }
              acc = std::clamp(acc, lo, hi);
            }
            w[p] = acc;
          }
        });
      }
      std::swap(u, w);

      // (ii) diffusion
      parallel_for(P, opt.threads, [&](std::size_t b, std::size_t e) {
        std::vector<int> idx = grid.unflat(b);
        for (std::size_t p = b; p < e; ++p, advance(idx)) {
          double acc = 0.0;
          for (int i = 0; i < m0; ++i) {
            const auto ui = static_cast<std::size_t>(i);
            const double h = grid.h(i);
            const int ii = idx[ui];
            const auto si = static_cast<std::size_t>(stride[ui]);
            auto Aij = [&](std::size_t q, std::size_t r, std::size_t s) { return Av[(q * um + r) * um + s]; };
            const double Ac = Aij(p, ui, ui);
            const double Ap = ii + 1 < nn[ui] ? Aij(p + si, ui, ui) : Ac;
            const double Am = ii > 0 ? Aij(p - si, ui, ui) : Ac;
            acc += (0.5 * (Ac + Ap) * (nb(u, p, i, ii, 1) - u[p]) - 0.5 * (Ac + Am) * (u[p] - nb(u, p, i, ii, -1))) / (h * h);
            for (int j = 0; j < m0; ++j) {
              if (j == i) continue;
              const auto uj = static_cast<std::size_t>(j);
              const int jj = idx[uj];
              double flux = 0.0;
              for (int sgn : {1, -1}) {
                const int mi = detail::far_index(ii + sgn, nn[ui], ff);
                if (mi < 0) continue;
                const auto q = static_cast<std::size_t>(static_cast<long long>(p) + (mi - ii) * stride[ui]);
                const double d = (nb(u, q, j, jj, 1) - nb(u, q, j, jj, -1)) / (2 * grid.h(j));
                flux += sgn * Aij(q, ui, uj) * d;
              }
              acc += flux / (2 * h);
            }
          }
          w[p] = u[p] + dt * acc;
        }
      });
      std::swap(u, w);

      // (iii) first-order terms, source, reaction
      if (has_b || has_a || has_c || has_f) {
        parallel_for(P, opt.threads, [&](std::size_t b, std::size_t e) {
          std::vector<int> idx = grid.unflat(b);
          for (std::size_t p = b; p < e; ++p, advance(idx)) {
            double acc = 0.0;
            for (int i = 0; i < m0; ++i) {
              const auto ui = static_cast<std::size_t>(i);
              const int ii = idx[ui];
              const double h = grid.h(i);
              if (has_b) {
                const double bi = bv[p * um + ui];
                acc += bi > 0.0 ? bi * (nb(u, p, i, ii, 1) - u[p]) / h : bi * (u[p] - nb(u, p, i, ii, -1)) / h;
              }
              if (has_a) {
                // -(F_{+1/2} - F_{-1/2}) / h with upwind face fluxes.
                auto a_at = [&](int off) {
                  const int m = std::clamp(ii + off, 0, nn[ui] - 1);
                  return av[static_cast<std::size_t>(static_cast<long long>(p) + (m - ii) * stride[ui]) * um + ui];
                };
                const double ap = 0.5 * (a_at(0) + a_at(1)), am = 0.5 * (a_at(-1) + a_at(0));
                const double Fp = ap * (ap > 0.0 ? u[p] : nb(u, p, i, ii, 1));
                const double Fm = am * (am > 0.0 ? nb(u, p, i, ii, -1) : u[p]);
                acc -= (Fp - Fm) / h;
              }
            }
            double v = u[p] + dt * acc + (has_f ? dt * fv[p] : 0.0);
            if (has_c) v *= std::exp(dt * cv[p]);
            w[p] = v;
          }
        });
        std::swap(u, w);
      }

      t = st + 1 == nsteps ? target : t + dt;
      ++steps;
      for (double v : u)
        if (!std::isfinite(v)) fail(Errc::unstable, "non-finite value at t = " + format_double(t));
      sample(t, false);
    }
    sol.times.push_back(target);
    sol.values.push_back(u);
    for (int i = 0; i < N; ++i) {
      double bx = 0.0;
      for (int corner = 0; corner < (1 << N); ++corner) {
        Vector x(N);
        for (int j = 0; j < N; ++j) x(j) = ((corner >> j) & 1) ? grid.hi(j) : grid.lo(j);
        bx = std::max(bx, std::abs((spec.B * x)(i)));
      }
      max_transport_courant = std::max(max_transport_courant, bx * dt / grid.h(i));
    }
  }

  // Far-field audit: boundary values relative to the interior maximum.
  double bmax = 0.0, imax = 0.0;
  {
    std::vector<int> idx(un, 0);
    for (std::size_t p = 0; p < P; ++p, advance(idx)) {
      const double a = std::abs(u[p]);
      if (grid.on_boundary(idx))
        bmax = std::max(bmax, a);
      else
        imax = std::max(imax, a);
    }
  }
  const double ratio = imax > 0.0 ? bmax / imax : 0.0;
  if (ff == FarField::zero && opt.box_check != BoxCheck::off && ratio > opt.box_tol) {
    const std::string msg = "boundary/interior ratio " + format_double(ratio) + " exceeds " + format_double(opt.box_tol);
    if (opt.box_check == BoxCheck::error) fail(Errc::box_too_small, msg);
    sol.warnings.push_back("BoxTooSmall: " + msg);
  }

  json h = json::array();
  for (int i = 0; i < N; ++i) h.push_back(grid.h(i));
  sol.stability = {{"dt_max", dt_max},
                   {"dt_min_used", dt_used_min},
                   {"diffusion_bound", diff_bound},
                   {"advection_bound", std::isfinite(adv_bound) ? json(adv_bound) : json(nullptr)},
                   {"Lambda", spec.Lambda},
                   {"h", h},
                   {"steps", steps},
                   {"transport_courant", max_transport_courant},
                   {"far_field", to_string(ff)},
                   {"interpolation", to_string(opt.interpolation)},
                   {"boundary_ratio", ratio}};
  return sol;
}

// ---------------------------------------------------------------- fundamental solution

struct FundamentalEstimate {
  GridSolution solution;  // Richardson-extrapolated snapshots at the requested times
  std::vector<GridSolution> runs;
  std::vector<double> widths;
  std::vector<double> spread;  // max |u_k - u_{k+1}| over nodes and positive times
  GroupPoint pole;

  /// Zero for t <= t0 by definition; interpolated otherwise.
  double value(const Vector& x, double t) const {
    if (!(t > pole.t)) return 0.0;
    return solution.interpolate(x, t);
  }
};

/// Approximates Gamma_L(., t; x0, t0) by solving Cauchy problems from the
/// frozen-coefficient kernel at elapsed times `widths` (decreasing). Slices at
/// times <= t0 are identically zero. The last two widths are extrapolated
/// linearly in the width.
inline FundamentalEstimate approx_fundamental(const OperatorSpec& spec, const Vector& x0, double t0,
                                              std::vector<double> widths, const Grid& grid,
                                              std::vector<double> save_times, SolveOptions opt = {}) {
  require(!widths.empty(), "at least one width is needed");
  for (std::size_t i = 1; i < widths.size(); ++i) require(widths[i] < widths[i - 1], "widths must decrease");
  require(widths.back() > 0.0, "widths must be positive");
  require(!save_times.empty(), "save times are required");
  std::sort(save_times.begin(), save_times.end());
  const Group g = spec.group();
  const Matrix A_frozen = spec.coeffs.A0(x0, t0);
  const GaussianKernel K = GaussianKernel::divergence_form(g, A_frozen);

  std::vector<double> positive;
  for (double s : save_times)
    if (s > t0) {
      require(s > t0 + widths.front(), "save times must follow the widest start time");
      positive.push_back(s);
    }

  FundamentalEstimate est;
  est.widths = widths;
  est.pole = GroupPoint(x0, t0);
  if (!positive.empty()) {
    for (double d : widths) {
      const double ts = t0 + d;
      const Field datum = function_field(
          [K, x0, t0](const Vector& x, double t) { return Matrix::Constant(1, 1, K(x, t, x0, t0)); },
          FieldShape::scalar(), true, "kernel_datum");
      SolveOptions o = opt;
      o.save_times = positive;
      est.runs.push_back(solve_cauchy(spec, datum, grid, ts, positive.back(), o));
    }
  }

  GridSolution& out = est.solution;
  out.grid = grid;
  out.times = save_times;
  out.spec = to_json(spec);
  out.spec_hash = spec_hash(spec);
  out.values.assign(save_times.size(), std::vector<double>(grid.size(), 0.0));
  const std::size_t R = est.runs.size();
  for (std::size_t k = 0; k < save_times.size(); ++k) {
    if (!(save_times[k] > t0)) continue;
    // Run snapshot 0 is the datum; requested times follow in order.
    const auto pos = static_cast<std::size_t>(std::find(positive.begin(), positive.end(), save_times[k]) - positive.begin());
    const auto& last = est.runs[R - 1].values[pos + 1];
    if (R == 1) {
      out.values[k] = last;
      continue;
    }
    const auto& prev = est.runs[R - 2].values[pos + 1];
    const double d1 = widths[R - 2], d2 = widths[R - 1];
    for (std::size_t p = 0; p < grid.size(); ++p) out.values[k][p] = last[p] + (last[p] - prev[p]) * d2 / (d1 - d2);
  }
  for (std::size_t r = 0; r + 1 < R; ++r) {
    double s = 0.0;
    for (std::size_t k = 1; k < est.runs[r].values.size(); ++k)
      for (std::size_t p = 0; p < grid.size(); ++p)
        s = std::max(s, std::abs(est.runs[r].values[k][p] - est.runs[r + 1].values[k][p]));
    est.spread.push_back(s);
  }
  if (!est.runs.empty()) {
    out.stability = est.runs.back().stability;
    for (const auto& r : est.runs) out.warnings.insert(out.warnings.end(), r.warnings.begin(), r.warnings.end());
  }
  return est;
}

// ---------------------------------------------------------------- weak formulation

/// Non-negative C^2 bump supported in Q_r(z0): with zeta = delta_{1/r}(z0^{-1} o z),
///   phi = prod_j (1 - |zeta^(j)|^2)^3 * (1 - (2 zeta_t + 1)^2)^3,
/// each factor cut off at zero.
struct TestFunction {
  GroupPoint center;
  double r = 1.0;

  double operator()(const Group& g, const Vector& x, double t) const { return eval(g, x, t, nullptr); }

  /// Value and gradient in the first block.
  double eval(const Group& g, const Vector& x, double t, Vector* grad0) const {
    const auto& bs = g.blocks();
    const GroupPoint zeta = g.dilate(1.0 / r, g.relative(center, {x, t}));
    if (grad0) *grad0 = Vector::Zero(bs.m0());
    const double s = 2.0 * zeta.t + 1.0;
    if (!(std::abs(s) < 1.0)) return 0.0;
    double val = std::pow(1.0 - s * s, 3);
    double f0 = 0.0, df0 = 0.0;
    for (std::size_t j = 0; j < bs.blocks.size(); ++j) {
      const Vector zj = zeta.x.segment(bs.offset(static_cast<int>(j)), bs.blocks[j]);
      const double q = zj.squaredNorm();
      if (!(q < 1.0)) return 0.0;
      const double fj = std::pow(1.0 - q, 3);
      if (j == 0) {
        f0 = fj;
        df0 = -3.0 * std::pow(1.0 - q, 2);
      } else {
        val *= fj;
      }
    }
    if (grad0) {
      const Vector z0 = zeta.x.head(bs.m0());
      *grad0 = val * df0 * 2.0 * z0 / r;
    }
    return val * f0;
  }

  /// Axis-aligned box containing the support.
  std::pair<Vector, Vector> bounding_box(const Group& g) const {
    const int N = g.N();
    Vector lo = Vector::Constant(N, std::numeric_limits<double>::infinity()), hi = -lo;
    const auto& bs = g.blocks();
    Vector rad(N);
    for (int i = 0; i < N; ++i) rad(i) = ipow(r, 2 * bs.block_of(i) + 1);
    for (int k = 0; k <= 64; ++k) {
      const double s = -r * r * k / 64.0;
      const Vector c = g.exp_drift(s) * center.x;
      lo = lo.cwiseMin(c - rad);
      hi = hi.cwiseMax(c + rad);
    }
    return {lo, hi};
  }
};

/// Trapezoid quadrature of
///   int -<A D u, D phi> + phi Y u + <b, D u> phi + c u phi + u <a, D phi>
/// over the support of phi, with D u central and Y u from lie_derivative.
inline double weak_residual(const GridSolution& u, const OperatorSpec& spec, const TestFunction& tf) {
  const Group g = spec.group();
  const Grid& grid = u.grid;
  const int m0 = spec.m0();
  const auto [blo, bhi] = tf.bounding_box(g);
  const double s = default_lie_step(u);
  for (int i = 0; i < grid.dim(); ++i)
    if (blo(i) - grid.lo(i) < 2 * grid.h(i) + s * 4 || grid.hi(i) - bhi(i) < 2 * grid.h(i) + s * 4)
      fail(Errc::support_exceeds_grid, "test function support leaves the grid in axis " + std::to_string(i));
  const double ta = tf.center.t - tf.r * tf.r, tb = tf.center.t;
  if (u.times.empty() || ta - s < u.times.front() || tb + s > u.times.back())
    fail(Errc::support_exceeds_grid, "test function support leaves the stored time range");

  const double vol = grid.cell_volume();
  double total = 0.0;
  for (std::size_t k = 0; k < u.times.size(); ++k) {
    const double t = u.times[k];
    if (!(t > ta && t < tb)) continue;
    const double dtl = k > 0 ? t - u.times[k - 1] : 0.0, dtr = k + 1 < u.times.size() ? u.times[k + 1] - t : 0.0;
    const double wt = 0.5 * (dtl + dtr);
    double acc = 0.0;
    for (std::size_t p = 0; p < grid.size(); ++p) {
      const std::vector<int> idx = grid.unflat(p);
      const Vector x = grid.point(idx);
      bool inside = true;
      for (int i = 0; i < grid.dim(); ++i) inside = inside && x(i) > blo(i) && x(i) < bhi(i);
      if (!inside) continue;
      Vector dphi;
      const double ph = tf.eval(g, x, t, &dphi);
      if (ph == 0.0 && dphi.isZero(0.0)) continue;
      const detail::NodeView v{u, k, p};
      Vector du(m0);
      for (int i = 0; i < m0; ++i) du(i) = (v.at(i, 1) - v.at(i, -1)) / (2 * grid.h(i));
      const Matrix A = spec.coeffs.A0(x, t);
      double val = -(A * du).dot(dphi);
      val += ph * lie_derivative(u, g, x, t, s);
      if (spec.coeffs.b) val += ph * spec.coeffs.b(x, t).col(0).dot(du);
      if (spec.coeffs.c) val += ph * spec.coeffs.c.scalar(x, t) * v.at(0, 0);
      if (spec.coeffs.a) val += v.at(0, 0) * spec.coeffs.a(x, t).col(0).dot(dphi);
      acc += val;
    }
    total += wt * acc * vol;
  }
  return total;
}

// ---------------------------------------------------------------- dilation invariance

/// Polynomial in (x, t): sum of c * prod x_i^{p_i} * t^q.
struct Polynomial {
  struct Term {
    double c;
    std::vector<int> px;
    int pt;
  };
  std::vector<Term> terms;

  double eval(const Vector& x, double t) const {
    double s = 0.0;
    for (const auto& m : terms) {
      double v = m.c * std::pow(t, m.pt);
      for (std::size_t i = 0; i < m.px.size(); ++i) v *= std::pow(x(static_cast<Eigen::Index>(i)), m.px[i]);
      s += v;
    }
    return s;
  }

  /// d/dx_i (axis >= 0) or d/dt (axis == -1).
  Polynomial derivative(int axis) const {
    Polynomial d;
    for (const auto& m : terms) {
      Term n = m;
      if (axis < 0) {
        if (m.pt == 0) continue;
        n.c *= m.pt;
        n.pt -= 1;
      } else {
        const auto a = static_cast<std::size_t>(axis);
        if (a >= m.px.size() || m.px[a] == 0) continue;
        n.c *= m.px[a];
        n.px[a] -= 1;
      }
      d.terms.push_back(n);
    }
    return d;
  }

  /// u o delta_r for exponents alpha (time exponent 2).
  Polynomial dilated(double r, const std::vector<int>& alpha) const {
    Polynomial d = *this;
    for (auto& m : d.terms) {
      int deg = 2 * m.pt;
      for (std::size_t i = 0; i < m.px.size(); ++i) deg += alpha[i] * m.px[i];
      m.c *= ipow(r, deg);
    }
    return d;
  }
};

/// K u = sum_{i<m0} d_i^2 u + <Bx, D u> - d_t u, evaluated exactly.
inline double principal_part(const Polynomial& u, const Matrix& B, int m0, const Vector& x, double t) {
  double v = 0.0;
  for (int i = 0; i < m0; ++i) v += u.derivative(i).derivative(i).eval(x, t);
  const Vector Bx = B * x;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (Bx(i) != 0.0) v += Bx(i) * u.derivative(static_cast<int>(i)).eval(x, t);
  return v - u.derivative(-1).eval(x, t);
}

/// max |K(u o delta_r)(z) - r^2 (K u)(delta_r z)| over `points`. B is taken as
/// given, so a non-canonical B shows up as a positive defect.
inline double dilation_invariance_check(const Matrix& B, const BlockStructure& bs, double r, const Polynomial& u,
                                        const std::vector<GroupPoint>& points) {
  require(r > 0.0, "r must be positive");
  const Polynomial ur = u.dilated(r, bs.alpha);
  double worst = 0.0;
  for (const auto& z : points) {
    Vector xr(z.x.size());
    for (Eigen::Index i = 0; i < z.x.size(); ++i) xr(i) = ipow(r, bs.alpha[static_cast<std::size_t>(i)]) * z.x(i);
    const double lhs = principal_part(ur, B, bs.m0(), z.x, z.t);
    const double rhs = r * r * principal_part(u, B, bs.m0(), xr, r * r * z.t);
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  return worst;
}

}  // namespace kolmo
