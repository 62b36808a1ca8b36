#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kolmo/coefficients.hpp"
#include "kolmo/error.hpp"
#include "kolmo/group.hpp"
#include "kolmo/structure.hpp"

namespace kolmo {

inline constexpr const char* kSpecSchema = "kolmo.operator/1";

/// Complete description of an operator: drift structure, coefficient fields,
/// time window and declared ellipticity bounds.
struct OperatorSpec {
  std::string schema = kSpecSchema;
  std::vector<int> blocks;
  Matrix B;
  Coefficients coeffs;
  Window window{0.0, 1.0};
  double lambda = 1.0;
  double Lambda = 1.0;
  // Directory against which relative grid paths are resolved.
  std::string base_dir = ".";

  int N() const { return static_cast<int>(B.rows()); }
  int m0() const { return blocks.empty() ? 0 : blocks.front(); }
  Group group() const { return Group::canonical(B, blocks); }

  /// Constant-coefficient operator div(A0 D) + <Bx, D> - d/dt.
  static OperatorSpec constant(const Matrix& B, std::vector<int> blocks, const Matrix& A0, Window w = {0.0, 1.0}) {
    OperatorSpec s;
    s.B = B;
    s.blocks = std::move(blocks);
    s.coeffs.A0 = constant_matrix(A0);
    s.window = w;
    Eigen::SelfAdjointEigenSolver<Matrix> es(A0, Eigen::EigenvaluesOnly);
    s.lambda = es.eigenvalues()(0);
    s.Lambda = es.eigenvalues()(A0.rows() - 1);
    return s;
  }

  /// Prototype with A0 = (sigma^2 / 2): its kernel is Gamma_K^{sigma^2}.
  static OperatorSpec prototype(double a = 1.0, Window w = {0.0, 1.0}) {
    return constant(Group::prototype().B(), {1, 1}, Matrix::Constant(1, 1, a), w);
  }
};

namespace detail {

inline Matrix json_to_matrix(const json& j) {
  if (!j.is_array() || j.empty()) fail(Errc::parse_error, "matrix must be a non-empty array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j[0].is_array() ? j[0].size() : 0);
  if (cols == 0) fail(Errc::parse_error, "matrix rows must be non-empty arrays");
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const json& r = j[static_cast<std::size_t>(i)];
    if (!r.is_array() || static_cast<Eigen::Index>(r.size()) != cols) fail(Errc::parse_error, "ragged matrix");
    for (Eigen::Index k = 0; k < cols; ++k) {
      if (!r[static_cast<std::size_t>(k)].is_number()) fail(Errc::parse_error, "matrix entries must be numbers");
      m(i, k) = r[static_cast<std::size_t>(k)].get<double>();
    }
  }
  return m;
}

inline FieldShape shape_of(const json& d, FieldShape fallback) {
  if (!d.contains("codomain")) return fallback;
  return {codomain_from_string(d.at("codomain").get<std::string>()), d.value("dim", fallback.dim)};
}

inline Field parse_field(const json& d, FieldShape want, int N, const std::string& base_dir) {
  // Shorthand: a bare number or array is a constant.
  if (d.is_number()) {
    const double v = d.get<double>();
    if (want.kind == Codomain::matrix) return constant_matrix(v * Matrix::Identity(want.dim, want.dim));
    if (want.kind == Codomain::vector) return constant_vector(Vector::Constant(want.dim, v));
    return constant_scalar(v);
  }
  if (d.is_array()) {
    if (want.kind == Codomain::matrix) return constant_matrix(json_to_matrix(d));
    Vector v(static_cast<Eigen::Index>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) v(static_cast<Eigen::Index>(i)) = d[i].get<double>();
    return constant_vector(v);
  }
  if (!d.is_object() || !d.contains("kind")) fail(Errc::parse_error, "field descriptor needs a 'kind'");
  const std::string kind = d.at("kind").get<std::string>();
  const FieldShape shape = shape_of(d, want);
  if (kind == "constant") {
    const json& v = d.at("value");
    Matrix m = v.is_number() ? Matrix::Constant(1, 1, v.get<double>()) : json_to_matrix(v);
    return constant_field(m, shape);
  }
  if (kind == "preset") return preset_field(d.at("name").get<std::string>(), d.value("params", json::object()), shape);
  if (kind == "checkerboard") {
    CheckerboardField::Params p;
    p.seed = d.value("seed", std::uint64_t{0});
    p.h = d.value("h", p.h);
    p.tau = d.value("tau", p.tau);
    p.low = d.value("low", p.low);
    p.high = d.value("high", p.high);
    p.parity = d.value("pattern", std::string("random")) == "parity";
    return checkerboard_field(p, shape);
  }
  if (kind == "grid") {
    const std::string rel = d.at("path").get<std::string>();
    std::filesystem::path p(rel);
    if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
    auto g = GridField::from_csv(p.string(), N, shape);
    g->set_source(rel);
    return Field(std::shared_ptr<const FieldImpl>(std::move(g)));
  }
  if (kind == "mollified") {
    const Field base = parse_field(d.at("base"), want, N, base_dir);
    return mollify(base, d.at("eps").get<double>(), {d.at("T0").get<double>(), d.at("T1").get<double>()}, N,
                   d.value("nodes", 16));
  }
  if (kind == "rescaled") {
    const Field base = parse_field(d.at("base"), want, N, base_dir);
    return rescaled_field(base, d.at("alpha").get<std::vector<int>>(), d.at("r").get<double>(),
                          d.at("power").get<int>());
  }
  if (kind == "function") fail(Errc::parse_error, "function fields cannot be loaded from a file");
  fail(Errc::parse_error, "unknown field kind '" + kind + "'");
}

}  // namespace detail

/// Samples A0 over [-4, 4]^N x window and checks the declared bounds
/// lambda <= eig(A0) <= Lambda (relative slack 1e-9).
inline EllipticityReport validate_ellipticity(const OperatorSpec& s, std::size_t samples = 256) {
  Box H{Vector::Constant(s.N(), -4.0), Vector::Constant(s.N(), 4.0), s.window.T0, s.window.T1};
  if (!s.window.bounded()) H.t0 = 0.0, H.t1 = 1.0;
  const auto rep = check_ellipticity(s.coeffs.A0, sample_box(H, samples, 0x5eed));
  if (!rep.violations.empty()) fail(Errc::not_spd, "A0 is not positive definite at some sample point");
  const double slack = 1e-9;
  if (rep.lambda_hat < s.lambda * (1.0 - slack) || rep.Lambda_hat > s.Lambda * (1.0 + slack))
    fail(Errc::inconsistent, "declared ellipticity [" + std::to_string(s.lambda) + ", " + std::to_string(s.Lambda) +
                                 "] does not contain the sampled range [" + std::to_string(rep.lambda_hat) + ", " +
                                 std::to_string(rep.Lambda_hat) + "]");
  return rep;
}

/// Shape and structural checks; ellipticity sampling is optional because it
/// evaluates A0 a few hundred times.
inline void validate(const OperatorSpec& s, bool sample_ellipticity = true) {
  if (s.schema != kSpecSchema) fail(Errc::parse_error, "unsupported schema '" + s.schema + "'");
  detect_canonical_form(s.B, s.blocks);
  require(static_cast<bool>(s.coeffs.A0), "A0 is required");
  const FieldShape a = s.coeffs.A0.shape();
  require(a.rows() == s.m0() && a.cols() == s.m0(), "A0 must be m0 x m0");
  if (s.coeffs.b) require(s.coeffs.b.shape().rows() == s.m0() && s.coeffs.b.shape().cols() == 1, "b must be an m0-vector");
  if (s.coeffs.a) require(s.coeffs.a.shape().rows() == s.m0() && s.coeffs.a.shape().cols() == 1, "a must be an m0-vector");
  if (s.coeffs.c) require(s.coeffs.c.shape().rows() == 1 && s.coeffs.c.shape().cols() == 1, "c must be scalar");
  require(s.window.T1 > s.window.T0, "window must satisfy T0 < T1");
  require(s.lambda > 0.0 && s.Lambda >= s.lambda, "ellipticity needs 0 < lambda <= Lambda");
  if (sample_ellipticity) validate_ellipticity(s);
}

inline OperatorSpec parse_spec(const json& j, const std::string& base_dir = ".", bool sample_ellipticity = true) {
  OperatorSpec s;
  s.base_dir = base_dir;
  try {
    s.schema = j.value("schema", std::string(kSpecSchema));
    const json& st = j.at("structure");
    s.blocks = st.at("blocks").get<std::vector<int>>();
    s.B = detail::json_to_matrix(st.at("B"));
    if (s.B.rows() != s.B.cols()) fail(Errc::parse_error, "B must be square");
    const int N = static_cast<int>(s.B.rows());
    const int m0 = s.blocks.empty() ? 0 : s.blocks.front();
    if (m0 <= 0) fail(Errc::parse_error, "blocks must be non-empty and positive");
    const json& k = j.at("coefficients");
    s.coeffs.A0 = detail::parse_field(k.at("A0"), FieldShape::matrix(m0), N, base_dir);
    if (k.contains("b") && !k.at("b").is_null())
      s.coeffs.b = detail::parse_field(k.at("b"), FieldShape::vector(m0), N, base_dir);
    if (k.contains("c") && !k.at("c").is_null())
      s.coeffs.c = detail::parse_field(k.at("c"), FieldShape::scalar(), N, base_dir);
    if (k.contains("a") && !k.at("a").is_null())
      s.coeffs.a = detail::parse_field(k.at("a"), FieldShape::vector(m0), N, base_dir);
    if (j.contains("window")) s.window = {j["window"].at("T0").get<double>(), j["window"].at("T1").get<double>()};
    const json& e = j.at("ellipticity");
    s.lambda = e.at("lambda").get<double>();
    s.Lambda = e.at("Lambda").get<double>();
  } catch (const json::exception& ex) {
    fail(Errc::parse_error, ex.what());
  }
  validate(s, sample_ellipticity);
  return s;
}

inline json to_json(const OperatorSpec& s) {
  json k = json::object();
  k["A0"] = s.coeffs.A0.descriptor();
  k["b"] = s.coeffs.b ? s.coeffs.b.descriptor() : json(nullptr);
  k["c"] = s.coeffs.c ? s.coeffs.c.descriptor() : json(nullptr);
  k["a"] = s.coeffs.a ? s.coeffs.a.descriptor() : json(nullptr);
  return {{"schema", s.schema},
          {"structure", {{"blocks", s.blocks}, {"B", detail::matrix_to_json(s.B)}}},
          {"coefficients", k},
          {"window", {{"T0", s.window.T0}, {"T1", s.window.T1}}},
          {"ellipticity", {{"lambda", s.lambda}, {"Lambda", s.Lambda}}}};
}

inline OperatorSpec load_spec(const std::string& path, bool sample_ellipticity = true) {
  std::ifstream in(path);
  if (!in) fail(Errc::parse_error, "cannot open spec '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    fail(Errc::parse_error, std::string("malformed JSON: ") + ex.what());
  }
  const auto dir = std::filesystem::path(path).parent_path();
  return parse_spec(j, dir.empty() ? std::string(".") : dir.string(), sample_ellipticity);
}

/// FNV-1a over the canonical serialisation; identifies a spec in artifacts.
inline std::string spec_hash(const OperatorSpec& s) {
  const std::string text = to_json(s).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace kolmo
