#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kolmo/error.hpp"
#include "kolmo/group.hpp"
#include "kolmo/linalg.hpp"
#include "kolmo/quadrature.hpp"

namespace kolmo {

using json = nlohmann::json;

enum class Codomain { scalar, vector, matrix };

struct FieldShape {
  Codomain kind = Codomain::scalar;
  int dim = 1;  // m for vectors and m x m matrices

  Eigen::Index rows() const { return kind == Codomain::scalar ? 1 : dim; }
  Eigen::Index cols() const { return kind == Codomain::matrix ? dim : 1; }

  static FieldShape scalar() { return {Codomain::scalar, 1}; }
  static FieldShape vector(int m) { return {Codomain::vector, m}; }
  static FieldShape matrix(int m) { return {Codomain::matrix, m}; }

  friend bool operator==(const FieldShape&, const FieldShape&) = default;
};

inline std::string to_string(Codomain c) {
  switch (c) {
    case Codomain::scalar: return "scalar";
    case Codomain::vector: return "vector";
    case Codomain::matrix: return "matrix";
  }
  return "scalar";
}

inline Codomain codomain_from_string(const std::string& s) {
  if (s == "scalar") return Codomain::scalar;
  if (s == "vector") return Codomain::vector;
  if (s == "matrix") return Codomain::matrix;
  fail(Errc::parse_error, "unknown codomain '" + s + "'");
}

/// Time interval on which a field is defined.
struct Window {
  double T0 = -std::numeric_limits<double>::infinity();
  double T1 = std::numeric_limits<double>::infinity();
  bool contains(double t) const { return t >= T0 && t <= T1; }
  bool bounded() const { return std::isfinite(T0) && std::isfinite(T1); }
};

/// Axis-aligned spatial box times a time interval.
struct Box {
  Vector lo, hi;
  double t0 = 0.0, t1 = 0.0;
  int dim() const { return static_cast<int>(lo.size()); }
};

class FieldImpl {
 public:
  virtual ~FieldImpl() = default;
  virtual Matrix eval(const Vector& x, double t) const = 0;
  virtual FieldShape shape() const = 0;
  virtual bool time_dependent() const = 0;
  virtual json descriptor() const = 0;
};

/// Coefficient or datum evaluable at (x, t). Immutable, cheap to copy.
class Field {
 public:
  Field() = default;
  explicit Field(std::shared_ptr<const FieldImpl> impl) : impl_(std::move(impl)) {}

  Matrix operator()(const Vector& x, double t) const { return impl_->eval(x, t); }
  double scalar(const Vector& x, double t) const { return impl_->eval(x, t)(0, 0); }

  FieldShape shape() const { return impl_->shape(); }
  bool time_dependent() const { return impl_->time_dependent(); }
  json descriptor() const { return impl_->descriptor(); }
  const FieldImpl* impl() const { return impl_.get(); }
  explicit operator bool() const { return static_cast<bool>(impl_); }

 private:
  std::shared_ptr<const FieldImpl> impl_;
};

namespace detail {

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json r = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(r);
  }
  return rows;
}

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Unnormalised bump exp(-1/(1-s^2)) on (-1, 1).
inline double bump(double s) {
  const double q = 1.0 - s * s;
  return q > 0.0 ? std::exp(-1.0 / q) : 0.0;
}

/// Normalised bump phi and its distribution function Phi on [-1, 1].
/// Phi is tabulated once and interpolated by cubic Hermite with phi as slope.
class BumpCdf {
 public:
  static const BumpCdf& instance() {
    static const BumpCdf cdf;
    return cdf;
  }

  double pdf(double s) const { return bump(s) / mass_; }

  double cdf(double s) const {
    if (s <= -1.0) return 0.0;
    if (s >= 1.0) return 1.0;
    const double u = (s + 1.0) / h_;
    const auto k = std::min(static_cast<std::size_t>(u), kIntervals - 1);
    const double a = -1.0 + h_ * static_cast<double>(k);
    const double th = (s - a) / h_;
    const double p0 = table_[k], p1 = table_[k + 1];
    const double m0 = pdf(a) * h_, m1 = pdf(a + h_) * h_;
    const double th2 = th * th, th3 = th2 * th;
    return (2 * th3 - 3 * th2 + 1) * p0 + (th3 - 2 * th2 + th) * m0 + (-2 * th3 + 3 * th2) * p1 + (th3 - th2) * m1;
  }

  double mass() const { return mass_; }

 private:
  static constexpr std::size_t kIntervals = 4096;

  BumpCdf() {
    h_ = 2.0 / static_cast<double>(kIntervals);
    table_.assign(kIntervals + 1, 0.0);
    const auto rule = quad::gauss_legendre(10);
    double acc = 0.0;
    for (std::size_t k = 0; k < kIntervals; ++k) {
      const double a = -1.0 + h_ * static_cast<double>(k);
      for (std::size_t i = 0; i < rule.size(); ++i)
        acc += 0.5 * h_ * rule.weights[i] * bump(a + 0.5 * h_ * (rule.nodes[i] + 1.0));
      table_[k + 1] = acc;
    }
    mass_ = acc;
    for (double& v : table_) v /= mass_;
  }

  double h_ = 0.0;
  double mass_ = 1.0;
  std::vector<double> table_;
};

}  // namespace detail

// ---------------------------------------------------------------- kinds

class ConstantField final : public FieldImpl {
 public:
  ConstantField(Matrix value, FieldShape shape) : value_(std::move(value)), shape_(shape) {
    require(value_.rows() == shape_.rows() && value_.cols() == shape_.cols(), "constant value has wrong shape");
  }
  Matrix eval(const Vector&, double) const override { return value_; }
  FieldShape shape() const override { return shape_; }
  bool time_dependent() const override { return false; }
  json descriptor() const override {
    json d{{"kind", "constant"}, {"codomain", to_string(shape_.kind)}, {"dim", shape_.dim}};
    d["value"] = detail::matrix_to_json(value_);
    return d;
  }

 private:
  Matrix value_;
  FieldShape shape_;
};

/// Wraps an arbitrary callable; not serialisable beyond its label.
class FunctionField final : public FieldImpl {
 public:
  using Fn = std::function<Matrix(const Vector&, double)>;
  FunctionField(Fn fn, FieldShape shape, bool time_dep, std::string label)
      : fn_(std::move(fn)), shape_(shape), time_dep_(time_dep), label_(std::move(label)) {}
  Matrix eval(const Vector& x, double t) const override { return fn_(x, t); }
  FieldShape shape() const override { return shape_; }
  bool time_dependent() const override { return time_dep_; }
  json descriptor() const override {
    return {{"kind", "function"}, {"label", label_}, {"codomain", to_string(shape_.kind)}, {"dim", shape_.dim}};
  }

 private:
  Fn fn_;
  FieldShape shape_;
  bool time_dep_;
  std::string label_;
};

/// Named builtin fields.
///   coordinate       scalar x_k                                  params: index
///   affine           scalar c0 + <g, x> + gt t                   params: c0, g, gt
///   smooth_elliptic  (m + d sin(w x_1 + w x_N) cos(t)) I_m        params: lo, hi, freq
///   gaussian         scalar exp(-|x - x0|^2 / (2 s^2))            params: center, width
class PresetField final : public FieldImpl {
 public:
  PresetField(std::string name, json params, FieldShape shape)
      : name_(std::move(name)), params_(std::move(params)), shape_(shape) {
    if (name_ == "coordinate") {
      index_ = params_.value("index", 0);
      require(index_ >= 0, "coordinate index must be non-negative");
      shape_ = FieldShape::scalar();
    } else if (name_ == "affine") {
      c0_ = params_.value("c0", 0.0);
      gt_ = params_.value("gt", 0.0);
      g_ = params_.value("g", std::vector<double>{});
      shape_ = FieldShape::scalar();
    } else if (name_ == "smooth_elliptic") {
      lo_ = params_.value("lo", 1.0);
      hi_ = params_.value("hi", 2.0);
      freq_ = params_.value("freq", 1.0);
      require(lo_ > 0.0 && hi_ >= lo_, "smooth_elliptic needs 0 < lo <= hi");
      if (shape_.kind == Codomain::vector) fail(Errc::parse_error, "smooth_elliptic is scalar or matrix valued");
    } else if (name_ == "gaussian") {
      g_ = params_.value("center", std::vector<double>{});
      width_ = params_.value("width", 1.0);
      require(width_ > 0.0, "gaussian width must be positive");
      shape_ = FieldShape::scalar();
    } else {
      fail(Errc::parse_error, "unknown preset '" + name_ + "'");
    }
  }

  Matrix eval(const Vector& x, double t) const override {
    if (name_ == "coordinate") {
      require(index_ < x.size(), "coordinate index out of range");
      return Matrix::Constant(1, 1, x(index_));
    }
    if (name_ == "affine") {
      double v = c0_ + gt_ * t;
      for (std::size_t i = 0; i < g_.size() && static_cast<Eigen::Index>(i) < x.size(); ++i) v += g_[i] * x(i);
      return Matrix::Constant(1, 1, v);
    }
    if (name_ == "gaussian") {
      double r2 = 0.0;
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double c = static_cast<std::size_t>(i) < g_.size() ? g_[i] : 0.0;
        r2 += (x(i) - c) * (x(i) - c);
      }
      return Matrix::Constant(1, 1, std::exp(-0.5 * r2 / (width_ * width_)));
    }
    const double mid = 0.5 * (lo_ + hi_), amp = 0.5 * (hi_ - lo_);
    const double v = mid + amp * std::sin(freq_ * (x(0) + x(x.size() - 1))) * std::cos(t);
    return v * Matrix::Identity(shape_.rows(), shape_.cols());
  }
  FieldShape shape() const override { return shape_; }
  bool time_dependent() const override {
    return name_ == "smooth_elliptic" || (name_ == "affine" && gt_ != 0.0);
  }
  json descriptor() const override {
    return {{"kind", "preset"},
            {"name", name_},
            {"params", params_},
            {"codomain", to_string(shape_.kind)},
            {"dim", shape_.dim}};
  }

 private:
  std::string name_;
  json params_;
  FieldShape shape_;
  int index_ = 0;
  double c0_ = 0, gt_ = 0, lo_ = 1, hi_ = 2, freq_ = 1, width_ = 1;
  std::vector<double> g_;
};

/// Tensor-grid samples with multilinear interpolation; constant extension
/// outside the grid. Axes are the spatial coordinates and optionally time.
class GridField final : public FieldImpl {
 public:
  GridField(std::vector<std::vector<double>> axes, bool has_time, std::vector<double> values, FieldShape shape,
            std::string source = {})
      : axes_(std::move(axes)), has_time_(has_time), values_(std::move(values)), shape_(shape),
        source_(std::move(source)) {
    require(!axes_.empty(), "grid field needs at least one axis");
    std::size_t n = 1;
    for (const auto& a : axes_) {
      require(!a.empty(), "grid axis is empty");
      for (std::size_t i = 1; i < a.size(); ++i) require(a[i] > a[i - 1], "grid axes must be strictly increasing");
      n *= a.size();
    }
    comps_ = static_cast<std::size_t>(shape_.rows() * shape_.cols());
    require(values_.size() == n * comps_, "grid field sample count does not match axes");
    if (shape_.kind == Codomain::matrix) {
      for (std::size_t k = 0; k < n; ++k)
        for (int i = 0; i < shape_.dim; ++i)
          for (int j = 0; j < i; ++j)
            if (std::abs(values_[k * comps_ + i * shape_.dim + j] - values_[k * comps_ + j * shape_.dim + i]) >
                1e-12 * (1.0 + std::abs(values_[k * comps_ + i * shape_.dim + j])))
              fail(Errc::parse_error, "matrix grid samples must be symmetric");
    }
  }

  /// Reads `x1,...,xN[,t],v...` rows. Values are the trailing columns in
  /// row-major order of the codomain shape.
  static std::shared_ptr<GridField> from_csv(const std::string& path, int N, FieldShape shape) {
    std::ifstream in(path);
    if (!in) fail(Errc::parse_error, "cannot open grid file '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) fail(Errc::parse_error, "grid file is empty");
    std::vector<std::string> header;
    {
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    const bool has_time = static_cast<int>(header.size()) > N && header[static_cast<std::size_t>(N)] == "t";
    const std::size_t n_axes = static_cast<std::size_t>(N) + (has_time ? 1 : 0);
    const std::size_t comps = static_cast<std::size_t>(shape.rows() * shape.cols());
    if (header.size() != n_axes + comps) fail(Errc::parse_error, "grid header has the wrong number of columns");
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<double> r;
      std::stringstream ss(line);
      std::string cell;
      try {
        while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(Errc::parse_error, "non-numeric entry in grid file");
      }
      if (r.size() != header.size()) fail(Errc::parse_error, "ragged row in grid file");
      rows.push_back(std::move(r));
    }
    std::vector<std::vector<double>> axes(n_axes);
    for (std::size_t a = 0; a < n_axes; ++a) {
      for (const auto& r : rows) axes[a].push_back(r[a]);
      std::sort(axes[a].begin(), axes[a].end());
      axes[a].erase(std::unique(axes[a].begin(), axes[a].end()), axes[a].end());
    }
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.size();
    if (n != rows.size()) fail(Errc::parse_error, "grid rows do not form a full tensor product");
    std::vector<double> values(n * comps);
    std::vector<char> seen(n, 0);
    for (const auto& r : rows) {
      std::size_t flat = 0;
      for (std::size_t a = 0; a < n_axes; ++a) {
        const auto it = std::lower_bound(axes[a].begin(), axes[a].end(), r[a]);
        flat = flat * axes[a].size() + static_cast<std::size_t>(it - axes[a].begin());
      }
      if (seen[flat]) fail(Errc::parse_error, "duplicate grid node");
      seen[flat] = 1;
      for (std::size_t c = 0; c < comps; ++c) values[flat * comps + c] = r[n_axes + c];
    }
    return std::make_shared<GridField>(std::move(axes), has_time, std::move(values), shape, path);
  }

  Matrix eval(const Vector& x, double t) const override {
    const std::size_t na = axes_.size();
    std::vector<std::size_t> lo(na);
    std::vector<double> frac(na);
    for (std::size_t a = 0; a < na; ++a) {
      const double q = (has_time_ && a + 1 == na) ? t : x(static_cast<Eigen::Index>(a));
      const auto& ax = axes_[a];
      if (ax.size() == 1 || q <= ax.front()) {
        lo[a] = 0;
        frac[a] = 0.0;
      } else if (q >= ax.back()) {
        lo[a] = ax.size() - 2;
        frac[a] = 1.0;
      } else {
        const auto it = std::upper_bound(ax.begin(), ax.end(), q);
        lo[a] = static_cast<std::size_t>(it - ax.begin()) - 1;
        frac[a] = (q - ax[lo[a]]) / (ax[lo[a] + 1] - ax[lo[a]]);
      }
    }
    Matrix out = Matrix::Zero(shape_.rows(), shape_.cols());
    for (std::size_t corner = 0; corner < (std::size_t{1} << na); ++corner) {
      double w = 1.0;
      std::size_t flat = 0;
      for (std::size_t a = 0; a < na; ++a) {
        const bool up = (corner >> a) & 1U;
        const std::size_t idx = std::min(lo[a] + (up ? 1 : 0), axes_[a].size() - 1);
        w *= up ? frac[a] : 1.0 - frac[a];
        flat = flat * axes_[a].size() + idx;
      }
      if (w == 0.0) continue;
      for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < out.cols(); ++j)
          out(i, j) += w * values_[flat * comps_ + static_cast<std::size_t>(i * out.cols() + j)];
    }
    return out;
  }
  FieldShape shape() const override { return shape_; }
  bool time_dependent() const override { return has_time_; }
  json descriptor() const override {
    return {{"kind", "grid"}, {"path", source_}, {"codomain", to_string(shape_.kind)}, {"dim", shape_.dim}};
  }
  const std::string& source() const { return source_; }
  void set_source(std::string s) { source_ = std::move(s); }

 private:
  std::vector<std::vector<double>> axes_;
  bool has_time_;
  std::vector<double> values_;
  FieldShape shape_;
  std::size_t comps_ = 1;
  std::string source_;
};

/// Piecewise-constant field on cells of side h (and duration tau when
/// tau > 0), each cell taking `low` or `high` (times I for matrix fields).
/// The pattern is either a seeded pseudo-random draw per cell or parity.
class CheckerboardField final : public FieldImpl {
 public:
  struct Params {
    std::uint64_t seed = 0;
    double h = 0.25;
    double tau = 0.0;
    double low = 1.0;
    double high = 2.0;
    bool parity = false;
  };

  CheckerboardField(Params p, FieldShape shape) : p_(p), shape_(shape) {
    require(p_.h > 0.0, "checkerboard cell side must be positive");
    require(p_.tau >= 0.0, "checkerboard cell duration must be non-negative");
    require(shape_.kind != Codomain::vector, "checkerboard is scalar or matrix valued");
  }

  bool is_high(const std::vector<long long>& cell) const {
    if (p_.parity) {
      long long s = 0;
      for (long long c : cell) s += c;
      return (s % 2 + 2) % 2 == 1;
    }
    std::uint64_t hsh = detail::splitmix64(p_.seed);
    for (long long c : cell) hsh = detail::splitmix64(hsh ^ static_cast<std::uint64_t>(c));
    return (hsh >> 63) != 0;
  }

  Matrix eval(const Vector& x, double t) const override {
    std::vector<long long> cell(static_cast<std::size_t>(x.size()) + (p_.tau > 0.0 ? 1 : 0));
    for (Eigen::Index i = 0; i < x.size(); ++i) cell[static_cast<std::size_t>(i)] = cell_index(x(i), p_.h);
    if (p_.tau > 0.0) cell.back() = cell_index(t, p_.tau);
    return level(is_high(cell) ? 1.0 : 0.0);
  }

  /// low + p (high - low), p in [0, 1] the share of high cells.
  Matrix level(double p) const {
    p = std::clamp(p, 0.0, 1.0);
    return (p_.low + p * (p_.high - p_.low)) * Matrix::Identity(shape_.rows(), shape_.cols());
  }

  static long long cell_index(double q, double side) { return static_cast<long long>(std::floor(q / side)); }

  const Params& params() const { return p_; }
  FieldShape shape() const override { return shape_; }
  bool time_dependent() const override { return p_.tau > 0.0; }
  json descriptor() const override {
    return {{"kind", "checkerboard"},
            {"seed", p_.seed},
            {"h", p_.h},
            {"tau", p_.tau},
            {"low", p_.low},
            {"high", p_.high},
            {"pattern", p_.parity ? "parity" : "random"},
            {"codomain", to_string(shape_.kind)},
            {"dim", shape_.dim}};
  }

 private:
  Params p_;
  FieldShape shape_;
};

/// (x, t) |-> r^power f(delta_r(x, t)).
class RescaledField final : public FieldImpl {
 public:
  RescaledField(Field base, std::vector<int> alpha, double r, int power)
      : base_(std::move(base)), alpha_(std::move(alpha)), r_(r), power_(power) {
    require(r_ > 0.0, "rescaling factor must be positive");
  }
  Matrix eval(const Vector& x, double t) const override {
    Vector y = x;
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) *= ipow(r_, alpha_[static_cast<std::size_t>(i)]);
    return ipow(r_, power_) * base_(y, r_ * r_ * t);
  }
  FieldShape shape() const override { return base_.shape(); }
  bool time_dependent() const override { return base_.time_dependent(); }
  json descriptor() const override {
    return {{"kind", "rescaled"}, {"r", r_}, {"power", power_}, {"alpha", alpha_}, {"base", base_.descriptor()}};
  }

 private:
  Field base_;
  std::vector<int> alpha_;
  double r_;
  int power_;
};

/// Mollification with the product bump
///   psi(y) = prod_i sqrt(N) phi(sqrt(N) y_i),   supp psi = [-1/sqrt N, 1/sqrt N]^N  in B(0,1),
///   rho(s) = (4/T) phi((s - T/2) / (T/4)),     supp rho = B(T/2, T/4),
/// phi the normalised exp(-1/(1-s^2)) bump, and time argument
/// T0 + (1-eps)(t - T0) + tau. Checkerboards are integrated cell by cell
/// through the bump's distribution function, which is exact and keeps the
/// result smooth in (x, t). Other fields use a tensor product of a mapped
/// trapezoid rule with discretely normalised weights, so constants are reproduced exactly and
/// every value is a convex combination of samples.
class MollifiedField final : public FieldImpl {
 public:
  MollifiedField(Field base, double eps, Window window, int N, int nodes = 16)
      : base_(std::move(base)), eps_(eps), window_(window), N_(N), nodes_(nodes) {
    require(eps_ > 0.0 && eps_ <= 1.0, "eps must lie in (0, 1]");
    require(window_.bounded() && window_.T1 > window_.T0, "mollification needs a bounded time window");
    require(N_ >= 1, "spatial dimension must be positive");
    require(nodes_ >= 2, "at least two nodes per axis");
    checker_ = dynamic_cast<const CheckerboardField*>(base_.impl());
    half_ = eps_ / std::sqrt(static_cast<double>(N_));
    build_rule();
  }

  Matrix eval(const Vector& x, double t) const override {
    require(x.size() == N_, "point dimension does not match the mollifier");
    const double T = window_.T1 - window_.T0;
    const double base_t = window_.T0 + (1.0 - eps_) * (t - window_.T0);
    if (!(base_t + eps_ * T / 4.0 > window_.T0 && base_t + 3.0 * eps_ * T / 4.0 < window_.T1))
      fail(Errc::window_underflow, "shifted time leaves the field window");
    if (checker_) return eval_checkerboard(x, base_t);
    const bool with_time = base_.time_dependent();
    Matrix acc = Matrix::Zero(base_.shape().rows(), base_.shape().cols());
    Vector y(N_);
    const std::size_t nt = with_time ? time_nodes_.size() : 1;
    for (std::size_t k = 0; k < nt; ++k) {
      const double s = with_time ? base_t + time_nodes_[k] : base_t + eps_ * T / 2.0;
      const double wt = with_time ? time_weights_[k] : 1.0;
      quad::for_each_tensor_index(space_nodes_.size(), static_cast<std::size_t>(N_),
                                  [&](const std::vector<std::size_t>& idx) {
                                    double w = wt;
                                    for (int i = 0; i < N_; ++i) {
                                      y(i) = x(i) - space_nodes_[idx[static_cast<std::size_t>(i)]];
                                      w *= space_weights_[idx[static_cast<std::size_t>(i)]];
                                    }
                                    acc += w * base_(y, s);
                                  });
    }
    return acc;
  }

  FieldShape shape() const override { return base_.shape(); }
  // The time shift only matters when the base field depends on time.
  bool time_dependent() const override { return base_.time_dependent(); }
  json descriptor() const override {
    return {{"kind", "mollified"},
            {"eps", eps_},
            {"T0", window_.T0},
            {"T1", window_.T1},
            {"nodes", nodes_},
            {"base", base_.descriptor()}};
  }

  double eps() const { return eps_; }
  const Window& window() const { return window_; }
  const Field& base() const { return base_; }

 private:
  // Mapped trapezoid rule: s = tanh(v) turns the bump weight into
  // exp(-cosh^2 v) sech^2 v, analytic in a strip and double-exponentially
  // decaying, so equispaced nodes in v converge geometrically. Gauss-Legendre
  // on the bump itself only reaches ~1e-6 at 16 nodes.
  static std::pair<std::vector<double>, std::vector<double>> bump_rule(int n) {
    const double L = 2.0 + 0.4 * std::log2(static_cast<double>(n) / 16.0);
    const double L_used = std::clamp(L, 1.2, 3.2);
    std::vector<double> s(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int k = 0; k < n; ++k) {
      const double v = -L_used + 2.0 * L_used * k / (n - 1);
      const double c = std::cosh(v);
      s[static_cast<std::size_t>(k)] = std::tanh(v);
      w[static_cast<std::size_t>(k)] = std::exp(-c * c) / (c * c);
      total += w[static_cast<std::size_t>(k)];
    }
    for (double& x : w) x /= total;
    return {s, w};
  }

  void build_rule() {
    const auto [nodes, weights] = bump_rule(nodes_);
    const double T = window_.T1 - window_.T0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      space_nodes_.push_back(half_ * nodes[i]);
      time_nodes_.push_back(eps_ * (T / 2.0 + T / 4.0 * nodes[i]));
    }
    space_weights_ = weights;
    time_weights_ = weights;
  }

  // Per-axis weights of the cells met by the support around q, support
  // half-width `half` and centre offset `centre`.
  static void axis_weights(double q, double side, double half, std::vector<long long>& cells,
                           std::vector<double>& weights) {
    const auto& cdf = detail::BumpCdf::instance();
    cells.clear();
    weights.clear();
    const long long first = CheckerboardField::cell_index(q - half, side);
    const long long last = CheckerboardField::cell_index(q + half, side);
    for (long long k = first; k <= last; ++k) {
      // mass of the bump centred at q inside [k side, (k+1) side)
      const double a = (static_cast<double>(k) * side - q) / half;
      const double b = (static_cast<double>(k + 1) * side - q) / half;
      const double w = cdf.cdf(b) - cdf.cdf(a);
      if (w <= 0.0) continue;
      cells.push_back(k);
      weights.push_back(w);
    }
  }

  Matrix eval_checkerboard(const Vector& x, double base_t) const {
    const auto& p = checker_->params();
    const std::size_t dims = static_cast<std::size_t>(N_) + (p.tau > 0.0 ? 1 : 0);
    std::vector<std::vector<long long>> cells(dims);
    std::vector<std::vector<double>> weights(dims);
    for (int i = 0; i < N_; ++i)
      axis_weights(x(i), p.h, half_, cells[static_cast<std::size_t>(i)], weights[static_cast<std::size_t>(i)]);
    if (p.tau > 0.0) {
      const double T = window_.T1 - window_.T0;
      axis_weights(base_t + eps_ * T / 2.0, p.tau, eps_ * T / 4.0, cells.back(), weights.back());
    }
    double high = 0.0;
    std::vector<std::size_t> idx(dims, 0);
    std::vector<long long> cell(dims);
    while (true) {
      double w = 1.0;
      for (std::size_t d = 0; d < dims; ++d) {
        cell[d] = cells[d][idx[d]];
        w *= weights[d][idx[d]];
      }
      if (checker_->is_high(cell)) high += w;
      std::size_t d = 0;
      while (d < dims && ++idx[d] == cells[d].size()) idx[d++] = 0;
      if (d == dims) break;
    }
    return checker_->level(high);
  }

  Field base_;
  double eps_;
  Window window_;
  int N_;
  int nodes_;
  double half_ = 0.0;
  const CheckerboardField* checker_ = nullptr;
  std::vector<double> space_nodes_, space_weights_, time_nodes_, time_weights_;
};

// ---------------------------------------------------------------- factories

inline Field constant_field(const Matrix& value, FieldShape shape) {
  return Field(std::make_shared<ConstantField>(value, shape));
}
inline Field constant_scalar(double v) { return constant_field(Matrix::Constant(1, 1, v), FieldShape::scalar()); }
inline Field constant_matrix(const Matrix& m) {
  return constant_field(m, FieldShape::matrix(static_cast<int>(m.rows())));
}
inline Field constant_vector(const Vector& v) {
  return constant_field(v, FieldShape::vector(static_cast<int>(v.size())));
}
inline Field function_field(FunctionField::Fn fn, FieldShape shape, bool time_dependent, std::string label) {
  return Field(std::make_shared<FunctionField>(std::move(fn), shape, time_dependent, std::move(label)));
}
inline Field preset_field(const std::string& name, const json& params, FieldShape shape = FieldShape::scalar()) {
  return Field(std::make_shared<PresetField>(name, params, shape));
}
inline Field checkerboard_field(CheckerboardField::Params p, FieldShape shape) {
  return Field(std::make_shared<CheckerboardField>(p, shape));
}
inline Field rescaled_field(const Field& f, const std::vector<int>& alpha, double r, int power) {
  return Field(std::make_shared<RescaledField>(f, alpha, r, power));
}

/// f_eps on the window (T0, T1); see MollifiedField.
inline Field mollify(const Field& f, double eps, Window window, int N, int nodes = 16) {
  return Field(std::make_shared<MollifiedField>(f, eps, window, N, nodes));
}

/// Largest |f_n - f_{2n}| over `points` when the generic quadrature is used with
/// n and 2n nodes per axis. Meaningful for continuous fields only.
inline double mollify_doubling_defect(const Field& f, double eps, Window window, int N,
                                      const std::vector<GroupPoint>& points, int nodes = 16) {
  // Force the quadrature path by hiding the concrete type behind a function field.
  const Field opaque = function_field([f](const Vector& x, double t) { return f(x, t); }, f.shape(),
                                      f.time_dependent(), "opaque");
  const Field a = mollify(opaque, eps, window, N, nodes), b = mollify(opaque, eps, window, N, 2 * nodes);
  double worst = 0.0;
  for (const auto& z : points) worst = std::max(worst, (a(z.x, z.t) - b(z.x, z.t)).cwiseAbs().maxCoeff());
  return worst;
}

// ---------------------------------------------------------------- analysis

struct EllipticityReport {
  double lambda_hat = std::numeric_limits<double>::infinity();
  double Lambda_hat = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> violations;  // indices into the sample set
};

/// Extreme eigenvalues of A0 over the sample points; non-positive minima are
/// reported as violations.
inline EllipticityReport check_ellipticity(const Field& A0, const std::vector<GroupPoint>& samples) {
  require(A0.shape().kind == Codomain::matrix || A0.shape().kind == Codomain::scalar,
          "ellipticity needs a matrix-valued field");
  EllipticityReport rep;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const Matrix A = A0(samples[k].x, samples[k].t);
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (A + A.transpose()), Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues()(0), hi = es.eigenvalues()(A.rows() - 1);
    rep.lambda_hat = std::min(rep.lambda_hat, lo);
    rep.Lambda_hat = std::max(rep.Lambda_hat, hi);
    if (!(lo > 0.0)) rep.violations.push_back(k);
  }
  return rep;
}

/// Uniform random points in a box.
inline std::vector<GroupPoint> sample_box(const Box& H, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<GroupPoint> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Vector x(H.dim());
    for (int i = 0; i < H.dim(); ++i) x(i) = H.lo(i) + (H.hi(i) - H.lo(i)) * U(rng);
    out.emplace_back(std::move(x), H.t0 + (H.t1 - H.t0) * U(rng));
  }
  return out;
}

inline bool box_contains(const Box& H, const GroupPoint& z) {
  if (z.t < H.t0 || z.t > H.t1) return false;
  for (int i = 0; i < H.dim(); ++i)
    if (z.x(i) < H.lo(i) || z.x(i) > H.hi(i)) return false;
  return true;
}

inline double field_gap(const Matrix& a, const Matrix& b) { return (a - b).norm(); }

struct ModulusTable {
  std::vector<double> radii;
  std::vector<double> omega;
  std::size_t pairs_per_radius = 0;
};

namespace detail {

// w = z o delta_s(eta), eta uniform on the Euclidean unit sphere of R^{N+1};
// |eta| = 1 is also the homogeneous norm, so d(z, w) = s exactly.
inline GroupPoint offset_point(const Group& g, const GroupPoint& z, double s, std::mt19937_64& rng) {
  std::normal_distribution<double> G;
  Vector e(g.N() + 1);
  for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = G(rng);
  e /= e.norm();
  const GroupPoint eta(e.head(g.N()), e(g.N()));
  return g.compose(z, g.dilate(s, eta));
}

}  // namespace detail

/// Sampled omega_f(r) = sup { |f(z) - f(w)| : z, w in H, d(z, w) < r }.
/// A sup over samples is a lower bound of the true modulus; the running max
/// over increasing radii makes the table monotone.
inline ModulusTable modulus_of_continuity(const Field& f, const Group& g, const Box& H,
                                          const std::vector<double>& radii, std::size_t pairs = 100000,
                                          std::uint64_t seed = 1) {
  for (std::size_t i = 0; i < radii.size(); ++i) {
    require(radii[i] > 0.0, "radii must be positive");
    require(i == 0 || radii[i] > radii[i - 1], "radii must be increasing");
  }
  ModulusTable tab{radii, std::vector<double>(radii.size(), 0.0), pairs};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  double running = 0.0;
  for (std::size_t k = 0; k < radii.size(); ++k) {
    const auto zs = sample_box(H, pairs, rng());
    double best = 0.0;
    for (const auto& z : zs) {
      const GroupPoint w = detail::offset_point(g, z, radii[k] * U(rng), rng);
      if (!box_contains(H, w)) continue;
      best = std::max(best, field_gap(f(z.x, z.t), f(w.x, w.t)));
    }
    running = std::max(running, best);
    tab.omega[k] = running;
  }
  return tab;
}

struct DiniResult {
  double value = 0.0;
  double r_min = 0.0;
  double last_octave = 0.0;  // contribution of [r_min, 2 r_min]
  bool converged = false;
};

/// Trapezoid estimate of int_{r_min}^{1} omega(r)/r dr = int omega d(log r) on
/// the table's radii (clipped at 1). `converged` is false when the lowest
/// octave still contributes more than `tol` relative to the total.
inline DiniResult dini_integral(const ModulusTable& tab, double tol = 1e-2) {
  DiniResult res;
  if (tab.radii.empty()) return res;
  res.r_min = tab.radii.front();
  std::vector<double> lr, om;
  for (std::size_t k = 0; k < tab.radii.size() && tab.radii[k] <= 1.0; ++k) {
    lr.push_back(std::log(tab.radii[k]));
    om.push_back(tab.omega[k]);
  }
  for (std::size_t k = 1; k < lr.size(); ++k) {
    const double piece = 0.5 * (om[k] + om[k - 1]) * (lr[k] - lr[k - 1]);
    res.value += piece;
    if (std::exp(lr[k]) <= 2.0 * res.r_min * (1.0 + 1e-12)) res.last_octave += piece;
  }
  res.converged = res.last_octave <= tol * std::max(res.value, std::numeric_limits<double>::min()) ||
                  res.value == 0.0;
  return res;
}

/// Sampled sup |f(z) - f(w)| / d(z, w)^alpha over pairs with d in
/// [r_lo, r_hi] (log-uniform), same sampling scheme as the modulus.
inline double holder_seminorm(const Field& f, const Group& g, const Box& H, double alpha, std::size_t pairs = 100000,
                              std::uint64_t seed = 1, double r_lo = 1e-4, double r_hi = 1.0) {
  require(alpha > 0.0 && alpha <= 1.0, "Hoelder exponent must lie in (0, 1]");
  require(r_lo > 0.0 && r_hi > r_lo, "radius range must be positive and increasing");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> L(std::log(r_lo), std::log(r_hi));
  const auto zs = sample_box(H, pairs, rng());
  double best = 0.0;
  for (const auto& z : zs) {
    const double s = std::exp(L(rng));
    const GroupPoint w = detail::offset_point(g, z, s, rng);
    if (!box_contains(H, w)) continue;
    best = std::max(best, field_gap(f(z.x, z.t), f(w.x, w.t)) / std::pow(s, alpha));
  }
  return best;
}

/// Midpoint-rule L1 distance over a box at fixed time, n cells per axis.
inline double l1_distance(const Field& f, const Field& g, const Box& H, double t, int n) {
  require(n >= 1, "need at least one cell per axis");
  const int d = H.dim();
  double cell = 1.0;
  for (int i = 0; i < d; ++i) cell *= (H.hi(i) - H.lo(i)) / n;
  double acc = 0.0;
  Vector x(d);
  quad::for_each_tensor_index(static_cast<std::size_t>(n), static_cast<std::size_t>(d),
                              [&](const std::vector<std::size_t>& idx) {
                                for (int i = 0; i < d; ++i)
                                  x(i) = H.lo(i) + (H.hi(i) - H.lo(i)) * (idx[static_cast<std::size_t>(i)] + 0.5) / n;
                                acc += field_gap(f(x, t), g(x, t));
                              });
  return acc * cell;
}

/// Coefficients of div(A0 D u) + <b, D u> + c u - div(a u) on the first block.
struct Coefficients {
  Field A0;
  Field b;
  Field c;
  Field a;
};

/// Coefficients of L^(r): A o delta_r, r (b o delta_r), r^2 (c o delta_r), r (a o delta_r).
inline Coefficients rescale(const Coefficients& k, const std::vector<int>& alpha, double r) {
  Coefficients out;
  out.A0 = rescaled_field(k.A0, alpha, r, 0);
  if (k.b) out.b = rescaled_field(k.b, alpha, r, 1);
  if (k.c) out.c = rescaled_field(k.c, alpha, r, 2);
  if (k.a) out.a = rescaled_field(k.a, alpha, r, 1);
  return out;
}

}  // namespace kolmo
