// kolmo: command-line front end for the kolmo library.
//
// Exit codes: 0 success, 2 parse error or invalid argument, 3 non-canonical or
// rank-deficient structure, 4 non-SPD diffusion, 5 kernel/solver/mollifier
// failure, 6 Monte-Carlo failure, 7 verification or example failure.

#include <charconv>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "kolmo/asian.hpp"
#include "kolmo/coefficients.hpp"
#include "kolmo/kernel.hpp"
#include "kolmo/mc.hpp"
#include "kolmo/pde.hpp"
#include "kolmo/spec.hpp"
#include "kolmo/structure.hpp"
#include "kolmo/verify.hpp"

using namespace kolmo;

namespace {

int exit_code(Errc e, const std::string& family) {
  switch (e) {
    case Errc::parse_error:
    case Errc::invalid_argument: return 2;
    case Errc::not_canonical:
    case Errc::rank_deficient: return 3;
    case Errc::not_spd: return 4;
    default: break;
  }
  if (family == "mc") return 6;
  if (family == "check" || family == "example") return 7;
  return 5;
}

// ---------------------------------------------------------------- options

struct Opts {
  int threads = 0;
  std::string spec, out, solution, ensemble, points, datum, source = "kernel", scheme = "exponential";
  std::string field = "A0", far_field = "zero", interp = "cubic", payoff = "call";
  std::vector<double> pole, x, y, box, grid{0.1}, times, widths{0.2, 0.1}, eps{0.2, 0.1, 0.05};
  std::vector<double> lambda_grid{0.5, 1, 1.5, 2, 2.5, 3, 4, 5, 6, 8}, save_times, radii{0.5}, center, vertex, half,
      range, taus, center_times;
  std::vector<int> bins{40};
  double t0 = 0.0, t1 = 1.0, t = 1.0, s = 0.5, dt = 0.0, lambda = 0.0, R = 1.0, R0 = 2.0, omega = 0.5, C_probe = 0.0,
         floor = 1e-8, r = 0.5;
  std::size_t paths = 100000, chunk = std::size_t{1} << 14, trials = 200000, samples = 4096;
  std::uint64_t seed = 0;
  int snapshot = -1, lattice = 3, cells = 64;
  bool antithetic = false, smooth = false, check_homogeneity = false, sweep = false, csv = false, unnormalized = false;
  AsianInputs asian;
};

json scalar_json(const std::string& s) {
  long long n = 0;
  if (const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n); ec == std::errc() && p == s.data() + s.size())
    return n;
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec == std::errc() && p == s.data() + s.size()) return v;
  return s;
}

std::vector<std::string> split_default(std::string s) {
  if (s.size() >= 2 && (s.front() == '[' || s.front() == '{')) s = s.substr(1, s.size() - 2);
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

// Every option of the command with its effective value; the worker cap and
// the output location are not part of the configuration.
json resolved_config(const CLI::App& cmd, const std::string& name) {
  json c = {{"command", name}};
  for (const CLI::Option* o : cmd.get_options()) {
    const std::string key = o->get_single_name();
    if (key == "help" || key == "threads" || key == "out") continue;
    if (o->get_expected_max() == 0) {
      c[key] = o->count() > 0;
      continue;
    }
    const std::vector<std::string> vals = o->count() > 0 ? o->results() : split_default(o->get_default_str());
    if (o->get_items_expected_max() > 1) {
      json a = json::array();
      for (const auto& v : vals) a.push_back(scalar_json(v));
      c[key] = a;
    } else {
      c[key] = vals.empty() ? json(nullptr) : scalar_json(vals.front());
    }
  }
  return c;
}

// ---------------------------------------------------------------- io

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::invalid_argument, "cannot write '" + path + "'");
  f << text;
}

void emit_json(const json& j, const std::string& out) {
  const std::string text = j.dump(2) + "\n";
  if (out.empty())
    std::cout << text;
  else
    write_text(out, text);
}

// CSV goes to --out with its metadata in the sidecar `<out>.json`; without
// --out the CSV goes to stdout and the metadata to stderr.
void emit_csv(const std::string& csv, const json& meta, const std::string& out) {
  if (out.empty()) {
    std::cout << csv;
    std::cerr << meta.dump() << '\n';
  } else {
    write_text(out, csv);
    write_text(out + ".json", meta.dump(2) + "\n");
  }
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Errc::parse_error, "cannot open '" + path + "'");
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    fail(Errc::parse_error, std::string("malformed JSON: ") + e.what());
  }
}

Vector to_vector(const std::vector<double>& v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) x(static_cast<Eigen::Index>(i)) = v[i];
  return x;
}

Vector point_or_zero(const std::vector<double>& v, int N, const std::string& what) {
  if (v.empty()) return Vector::Zero(N);
  require(static_cast<int>(v.size()) == N, what + " needs " + std::to_string(N) + " coordinates");
  return to_vector(v);
}

GroupPoint space_time(const std::vector<double>& v, int N, const std::string& what) {
  require(static_cast<int>(v.size()) == N + 1, what + " needs " + std::to_string(N) + " coordinates and a time");
  return {to_vector(std::vector<double>(v.begin(), v.end() - 1)), v.back()};
}

Grid make_grid(const Opts& o, int N) {
  Vector lo = Vector::Constant(N, -4.0), hi = Vector::Constant(N, 4.0);
  if (!o.box.empty()) {
    require(static_cast<int>(o.box.size()) == 2 * N, "--box needs lo,hi for each of the " + std::to_string(N) + " axes");
    for (int i = 0; i < N; ++i) lo(i) = o.box[2 * i], hi(i) = o.box[2 * i + 1];
  }
  std::vector<double> h = o.grid;
  require(h.size() == 1 || static_cast<int>(h.size()) == N, "--grid takes one spacing or one per axis");
  if (h.size() == 1) h.assign(static_cast<std::size_t>(N), h[0]);
  for (double v : h) require(v > 0.0, "grid spacing must be positive");
  return Grid::with_spacing(lo, hi, h);
}

std::vector<double> required_times(const Opts& o) {
  require(!o.times.empty(), "--times is required");
  return o.times;
}

GaussianKernel make_kernel(const OperatorSpec& s, const GroupPoint& pole, double lambda) {
  if (lambda > 0.0) return GaussianKernel::scaled(s.group(), lambda);
  return GaussianKernel::divergence_form(s.group(), s.coeffs.A0(pole.x, pole.t));
}

json spec_block(const OperatorSpec& s) { return {{"spec", to_json(s)}, {"spec_hash", spec_hash(s)}}; }

SolveOptions solve_options(const Opts& o) {
  SolveOptions so;
  so.dt = o.dt;
  so.threads = o.threads;
  require(o.far_field == "zero" || o.far_field == "clamp", "--far-field is zero or clamp");
  require(o.interp == "linear" || o.interp == "cubic", "--interp is linear or cubic");
  so.far_field = o.far_field == "zero" ? FarField::zero : FarField::clamp;
  so.interpolation = o.interp == "linear" ? Interpolation::linear : Interpolation::cubic;
  return so;
}

McConfig mc_config(const Opts& o) {
  McConfig c;
  c.paths = o.paths;
  c.dt = o.dt > 0.0 ? o.dt : 1e-2;
  c.seed = o.seed;
  c.scheme = scheme_from_string(o.scheme);
  c.chunk_size = o.chunk;
  c.antithetic = o.antithetic;
  c.save_times = o.save_times;
  c.threads = o.threads;
  return c;
}

PathEnsemble ensemble_of(const Opts& o) {
  if (!o.ensemble.empty()) return PathEnsemble::load(o.ensemble);
  require(!o.spec.empty(), "a spec or --ensemble is required");
  const OperatorSpec s = load_spec(o.spec);
  return simulate(s, point_or_zero(o.x, s.N(), "--x0"), o.t0, o.t1, mc_config(o));
}

std::size_t snapshot_of(const Opts& o, const PathEnsemble& e) {
  if (o.snapshot < 0) return e.times.size() - 1;
  require(static_cast<std::size_t>(o.snapshot) < e.times.size(), "--snapshot out of range");
  return static_cast<std::size_t>(o.snapshot);
}

// The function examined by `check harnack|cone|global`.
GridSolution subject(const Opts& o, const OperatorSpec& s) {
  if (!o.solution.empty()) return GridSolution::load(o.solution);
  const Grid grid = make_grid(o, s.N());
  const auto times = required_times(o);
  const GroupPoint pole{point_or_zero(o.pole, s.N(), "--pole"), o.t0};
  if (o.source == "constant") return sample_on_grid(grid, times, [](const Vector&, double) { return 1.0; });
  if (o.source == "kernel") {
    const auto K = make_kernel(s, pole, o.lambda);
    return sample_on_grid(grid, times, [&](const Vector& x, double t) { return K(x, t, pole.x, pole.t); });
  }
  if (o.source == "pde") return approx_fundamental(s, pole.x, pole.t, o.widths, grid, times, solve_options(o)).solution;
  fail(Errc::invalid_argument, "--source is constant, kernel or pde here");
}

// ---------------------------------------------------------------- commands

void cmd_structure(const Opts& o, const json& cfg) {
  const json j = read_json(o.spec);
  Matrix B;
  std::vector<int> blocks;
  try {
    B = detail::json_to_matrix(j.at("structure").at("B"));
    blocks = j.at("structure").at("blocks").get<std::vector<int>>();
  } catch (const json::exception& e) {
    fail(Errc::parse_error, e.what());
  }
  if (B.rows() != B.cols() || blocks.empty() || blocks.front() <= 0 || blocks.front() > B.rows())
    fail(Errc::parse_error, "B must be square and blocks must start with 0 < m0 <= N");
  const HypoReport h = check_hypoellipticity(B, blocks.front());
  json rep = {{"kalman_rank", h.kalman_rank},
              {"c_min_eig", h.c_min_eig},
              {"hypoelliptic", h.hypoelliptic},
              {"N", B.rows()},
              {"m0", blocks.front()},
              {"config", cfg}};
  if (h.hypoelliptic) {
    const BlockStructure bs = detect_canonical_form(B, blocks);
    const OperatorSpec s = load_spec(o.spec);
    rep["blocks"] = bs.blocks;
    rep["Q"] = bs.Q;
    rep["exponents"] = bs.alpha;
    rep.update(spec_block(s));
  }
  emit_json(rep, o.out);
}

void cmd_kernel_eval(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const int N = s.N();
  const GroupPoint pole{point_or_zero(o.pole, N, "--pole"), o.t0};
  const auto K = make_kernel(s, pole, o.lambda);
  json meta = {{"config", cfg}, {"diffusion", detail::matrix_to_json(K.diffusion())}};
  meta.update(spec_block(s));

  if (o.check_homogeneity) {
    // Gamma(delta_r z; 0) r^Q = Gamma(z; 0) for the pole at the origin.
    const Group& g = K.group();
    const GroupPoint origin{Vector::Zero(N), 0.0};
    std::mt19937_64 rng(o.seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0), T(0.05, 1.0), L(std::log(0.1), std::log(10.0));
    double worst = 0.0;
    std::size_t used = 0;
    for (std::size_t k = 0; k < o.samples; ++k) {
      Vector x(N);
      for (int i = 0; i < N; ++i) x(i) = U(rng);
      const GroupPoint z{x, T(rng)};
      const double r = std::exp(L(rng));
      const double a = K.log_value(z.x, z.t, origin.x, origin.t);
      const double b = K.log_value(g.dilate(r, z).x, r * r * z.t, origin.x, origin.t) + g.Q() * std::log(r);
      worst = std::max(worst, std::abs(std::expm1(b - a)));
      ++used;
    }
    meta["max_defect"] = worst;
    meta["samples"] = used;
    meta["Q"] = g.Q();
    emit_json(meta, o.out);
    return;
  }

  std::vector<GroupPoint> pts;
  if (!o.points.empty()) {
    std::ifstream in(o.points);
    if (!in) fail(Errc::parse_error, "cannot open '" + o.points + "'");
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<double> row;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) {
        const json v = scalar_json(cell);
        if (!v.is_number()) fail(Errc::parse_error, "non-numeric cell '" + cell + "' in points file");
        row.push_back(v.get<double>());
      }
      pts.push_back(space_time(row, N, "each point"));
    }
  } else {
    const Grid grid = make_grid(o, N);
    for (double t : required_times(o))
      for (std::size_t p = 0; p < grid.size(); ++p) pts.emplace_back(grid.point(p), t);
  }
  std::ostringstream os;
  for (int i = 0; i < N; ++i) os << 'x' << (i + 1) << ',';
  os << "t,value\n";
  for (const auto& z : pts) {
    for (int i = 0; i < N; ++i) os << format_double(z.x(i)) << ',';
    os << format_double(z.t) << ',' << format_double(K(z.x, z.t, pole.x, pole.t)) << '\n';
  }
  emit_csv(os.str(), meta, o.out);
}

void cmd_kernel_reproduce(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const int N = s.N();
  const Vector y = point_or_zero(o.y, N, "--y");
  const auto K = make_kernel(s, {y, o.t0}, o.lambda);
  const auto r = reproduction_check(K, point_or_zero(o.x, N, "--x"), o.t, y, o.t0, o.s);
  json rep = {{"lhs", r.lhs}, {"rhs", r.rhs}, {"rel_err", r.rel_err}, {"nodes_per_axis", r.nodes_per_axis}, {"config", cfg}};
  rep.update(spec_block(s));
  emit_json(rep, "");
}

json solution_summary(const GridSolution& u, const std::string& prefix, const json& cfg) {
  return {{"files", {prefix + ".json", prefix + ".bin"}},
          {"times", u.times},
          {"stability", u.stability},
          {"warnings", u.warnings},
          {"spec_hash", u.spec_hash},
          {"config", cfg}};
}

void save_solution(GridSolution& u, const Opts& o, const json& cfg) {
  require(!o.out.empty(), "--out PREFIX is required");
  u.config = cfg;
  u.save(o.out);
  if (o.csv) {
    std::ostringstream os;
    u.write_csv(os);
    write_text(o.out + ".csv", os.str());
  }
}

void cmd_solve_cauchy(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  require(!o.datum.empty(), "--datum is required");
  json d;
  try {
    d = json::parse(o.datum);
  } catch (const json::exception& e) {
    fail(Errc::parse_error, std::string("--datum: ") + e.what());
  }
  const Field phi = detail::parse_field(d, FieldShape::scalar(), s.N(), s.base_dir);
  SolveOptions so = solve_options(o);
  so.save_times = o.save_times;
  GridSolution u = solve_cauchy(s, phi, make_grid(o, s.N()), o.t0, o.t1, so);
  save_solution(u, o, cfg);
  std::cout << solution_summary(u, o.out, cfg).dump(2) << '\n';
}

void cmd_solve_fundamental(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const auto est = approx_fundamental(s, point_or_zero(o.pole, s.N(), "--pole"), o.t0, o.widths, make_grid(o, s.N()),
                                      required_times(o), solve_options(o));
  GridSolution u = est.solution;
  save_solution(u, o, cfg);
  json rep = solution_summary(u, o.out, cfg);
  rep["widths"] = est.widths;
  rep["spread"] = est.spread;
  std::cout << rep.dump(2) << '\n';
}

void cmd_mc_simulate(const Opts& o, const json& cfg) {
  require(!o.out.empty(), "--out PREFIX is required");
  const PathEnsemble e = ensemble_of(o);
  e.save(o.out);
  const Moments m = moments(e, e.times.size() - 1);
  json rep = {{"files", {o.out + ".json", o.out + ".bin"}},
              {"times", e.times},
              {"final_mean", std::vector<double>(m.mean.data(), m.mean.data() + m.mean.size())},
              {"final_mean_se", std::vector<double>(m.mean_se.data(), m.mean_se.data() + m.mean_se.size())},
              {"mc", e.config},
              {"spec_hash", e.spec_hash},
              {"config", cfg}};
  std::cout << rep.dump(2) << '\n';
}

void cmd_mc_density(const Opts& o, const json& cfg) {
  const PathEnsemble e = ensemble_of(o);
  const std::size_t k = snapshot_of(o, e);
  DensityOptions d;
  d.bins = o.bins;
  d.smooth = o.smooth;
  d.normalize = !o.unnormalized;
  if (!o.range.empty()) {
    const int N = static_cast<int>(e.N);
    require(static_cast<int>(o.range.size()) == 2 * N, "--range needs lo,hi per axis");
    d.lo = Vector(N);
    d.hi = Vector(N);
    for (int i = 0; i < N; ++i) d.lo(i) = o.range[2 * i], d.hi(i) = o.range[2 * i + 1];
  }
  const DensityEstimate est = density_estimate(e, k, d);
  std::ostringstream os;
  est.write_csv(os);
  const json meta = {{"config", cfg},
                     {"mc", e.config},
                     {"provenance", e.provenance},
                     {"spec_hash", e.spec_hash},
                     {"time", e.times[k]},
                     {"paths", est.paths},
                     {"total_mass", est.total_mass},
                     {"bandwidth_bins", est.bandwidth_bins},
                     {"warnings", est.warnings}};
  emit_csv(os.str(), meta, o.out);
}

void cmd_mc_mass(const Opts& o, const json& cfg) {
  if (!o.taus.empty()) {
    const OperatorSpec s = load_spec(o.spec);
    const auto m = measure_DR(s.blocks, s.B, o.taus, o.R, o.trials, o.seed, point_or_zero(o.y, s.N(), "--y"));
    json rep = {{"taus", m.taus}, {"measure", m.estimates}, {"se", m.se}, {"slope", m.slope},
                {"intercept", m.intercept}, {"Q_half", 0.5 * s.group().Q()}, {"config", cfg}};
    rep.update(spec_block(s));
    emit_json(rep, o.out);
    return;
  }
  const PathEnsemble e = ensemble_of(o);
  const std::size_t k = snapshot_of(o, e);
  const MassReport m = mass_in_DR(e, k, o.R);
  json rep = {{"tau", m.tau},      {"mass", m.mass},           {"se", m.se}, {"fraction", m.fraction},
              {"total_mass", m.total_mass}, {"decay_rate", fit_mass_decay(e)}, {"mc", e.config},
              {"spec_hash", e.spec_hash},   {"config", cfg}};
  if (!o.spec.empty()) {
    const OperatorSpec s = load_spec(o.spec);
    const auto K = GaussianKernel::divergence_form(s.group(), s.coeffs.A0(e.x0, e.t0));
    rep["frozen_kernel_mass"] = mass_in_DR(K, e.x0, e.times[k], e.t0, o.R);
  }
  emit_json(rep, o.out);
}

void cmd_mollify(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const Field raw = o.field == "A0" ? s.coeffs.A0 : o.field == "b" ? s.coeffs.b : o.field == "c" ? s.coeffs.c
                  : o.field == "a" ? s.coeffs.a : Field();
  require(static_cast<bool>(raw), "--field names a coefficient (A0, b, c, a) present in the spec");
  const int N = s.N();
  const Grid grid = make_grid(o, N);
  const Box H{grid.lo, grid.hi, s.window.T0, s.window.bounded() ? s.window.T1 : s.window.T0 + 1.0};
  const auto pts = sample_box(H, o.samples, o.seed);
  auto describe = [&](const Field& f) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, top = -lo;
    for (const auto& z : pts) {
      const Matrix v = f(z.x, z.t);
      if (v.rows() == v.cols()) {
        Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (v + v.transpose()), Eigen::EigenvaluesOnly);
        lo = std::min(lo, es.eigenvalues()(0));
        hi = std::max(hi, es.eigenvalues()(v.rows() - 1));
      }
      top = std::max(top, v.maxCoeff());
    }
    json j = {{"max_entry", top}};
    if (std::isfinite(lo)) j["min_eig"] = lo, j["max_eig"] = hi;
    return j;
  };
  const double tmid = 0.5 * (H.t0 + H.t1);
  json rows = json::array();
  for (double e : o.eps) {
    const Field m = mollify(raw, e, s.window, N);
    json row = describe(m);
    row["eps"] = e;
    row["l1_to_raw"] = l1_distance(m, raw, H, tmid, o.cells);
    rows.push_back(row);
  }
  json rep = {{"field", o.field}, {"raw", describe(raw)}, {"mollified", rows}, {"t", tmid}, {"config", cfg}};
  rep.update(spec_block(s));
  emit_json(rep, o.out);
}

void cmd_check_bounds(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const int N = s.N();
  const GroupPoint pole{point_or_zero(o.pole, N, "--pole"), o.t0};
  std::vector<KernelSample> samples;
  json source = {{"kind", o.source}};
  if (o.source == "kernel") {
    const auto K = make_kernel(s, pole, o.lambda);
    const Grid grid = make_grid(o, N);
    for (double t : required_times(o))
      for (std::size_t p = 0; p < grid.size(); ++p) {
        const Vector x = grid.point(p);
        samples.push_back({x, t, K(x, t, pole.x, pole.t), 0.0});
      }
  } else if (o.source == "pde") {
    const Grid grid = make_grid(o, N);
    const auto est = approx_fundamental(s, pole.x, pole.t, o.widths, grid, required_times(o), solve_options(o));
    Vector half = 0.25 * (grid.hi - grid.lo);
    if (!o.half.empty()) half = point_or_zero(o.half, N, "--half");
    samples = samples_from_fundamental(est, half, o.floor);
    source["spread"] = est.spread;
    source["stability"] = est.solution.stability;
  } else if (o.source == "mc") {
    McConfig c = mc_config(o);
    c.save_times = required_times(o);
    const PathEnsemble e = simulate(s, pole.x, pole.t, std::max(o.t1, c.save_times.back()), c);
    DensityOptions d;
    d.bins = o.bins;
    for (double t : c.save_times) {
      const auto est = density_estimate(e, e.index_of(t), d);
      const auto more = samples_from_density(est, t);
      samples.insert(samples.end(), more.begin(), more.end());
    }
    source["mc"] = c.to_json();
  } else {
    fail(Errc::invalid_argument, "--source is kernel, pde or mc");
  }
  json rep = fit_sandwich(samples, pole, o.lambda_grid, s.blocks, s.B).to_json();
  rep["source"] = source;
  rep["config"] = cfg;
  rep.update(spec_block(s));
  emit_json(rep, o.out);
}

std::vector<GroupPoint> lattice_centers(const GridSolution& u, const Opts& o) {
  const Grid& g = u.grid;
  std::vector<double> ts = o.center_times;
  if (ts.empty()) ts.push_back(0.5 * (u.times.front() + u.times.back()));
  require(o.lattice >= 1, "--lattice must be positive");
  std::vector<GroupPoint> out;
  const int d = g.dim();
  std::vector<int> idx(static_cast<std::size_t>(d), 0);
  for (double t : ts) {
    std::fill(idx.begin(), idx.end(), 0);
    while (true) {
      Vector x(d);
      for (int i = 0; i < d; ++i) {
        const double f = o.lattice == 1 ? 0.5 : 0.3 + 0.4 * idx[static_cast<std::size_t>(i)] / (o.lattice - 1);
        x(i) = g.lo(i) + f * (g.hi(i) - g.lo(i));
      }
      out.emplace_back(x, t);
      int i = d - 1;
      while (i >= 0 && ++idx[static_cast<std::size_t>(i)] == o.lattice) idx[static_cast<std::size_t>(i--)] = 0;
      if (i < 0) break;
    }
  }
  return out;
}

HarnackOptions harnack_options(const Opts& o) {
  HarnackOptions h;
  h.omega = o.omega;
  h.R0 = o.R0;
  return h;
}

void cmd_check_harnack(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const GridSolution u = subject(o, s);
  const Group g = s.group();
  if (o.sweep) {
    const auto rep = harnack_sweep(u, g, lattice_centers(u, o), o.radii, harnack_options(o), o.threads);
    std::ostringstream os;
    rep.write_csv(os);
    json meta = {{"config", cfg}, {"fitted_C", rep.fitted_C}, {"omega", rep.omega}, {"R0", rep.R0}};
    meta.update(spec_block(s));
    emit_csv(os.str(), meta, o.out);
    return;
  }
  json rep = harnack_local(u, g, space_time(o.center, s.N(), "--center"), o.r, harnack_options(o)).to_json();
  rep["config"] = cfg;
  rep.update(spec_block(s));
  emit_json(rep, o.out);
}

void cmd_check_cone(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const GridSolution u = subject(o, s);
  json rep = harnack_cone(u, s.group(), space_time(o.vertex, s.N(), "--vertex"), o.R, harnack_options(o), o.C_probe)
                 .to_json();
  rep["config"] = cfg;
  rep.update(spec_block(s));
  emit_json(rep, o.out);
}

void cmd_check_global(const Opts& o, const json& cfg) {
  const OperatorSpec s = load_spec(o.spec);
  const GridSolution u = subject(o, s);
  std::vector<GroupPoint> pts;
  for (double t : u.times)
    for (std::size_t p = 0; p < u.grid.size(); ++p) pts.emplace_back(u.grid.point(p), t);
  json rep = harnack_global(as_function(u), s.group(), point_or_zero(o.x, s.N(), "--x"), o.t, pts).to_json();
  rep["config"] = cfg;
  rep.update(spec_block(s));
  emit_json(rep, o.out);
}

void cmd_example_asian(const Opts& o, const json& cfg) {
  AsianInputs in = o.asian;
  in.payoff = payoff_from_string(o.payoff);
  in.threads = o.threads;
  json rep = price_asian(in).to_json();
  rep["config"] = cfg;
  emit_json(rep, o.out);
}

// ---------------------------------------------------------------- wiring

struct Command {
  CLI::App* app;
  std::string name, family;
  std::function<void(const Opts&, const json&)> run;
};

CLI::App* leaf(CLI::App* parent, const std::string& name, const std::string& help) {
  CLI::App* c = parent->add_subcommand(name, help);
  c->fallthrough();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernels, solvers, Monte Carlo and estimate checks for Kolmogorov-type operators", "kolmo"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  Opts o;
  app.add_option("--threads", o.threads, "Worker cap; 0 uses every available core")->check(CLI::NonNegativeNumber);

  std::vector<Command> cmds;
  auto spec_arg = [&](CLI::App* c, bool required = true) {
    auto* opt = c->add_option("spec", o.spec, "Operator spec (JSON)");
    if (required) opt->required();
  };
  auto grid_args = [&](CLI::App* c) {
    c->add_option("--box", o.box, "lo,hi per spatial axis (default -4,4)")->delimiter(',');
    c->add_option("--grid", o.grid, "Grid spacing h, one value or one per axis")->delimiter(',');
  };
  auto solve_args = [&](CLI::App* c) {
    c->add_option("--dt", o.dt, "Time step; 0 uses the stability bound");
    c->add_option("--far-field", o.far_field, "zero or clamp");
    c->add_option("--interp", o.interp, "linear or cubic");
  };
  auto mc_args = [&](CLI::App* c) {
    c->add_option("--x0", o.x, "Starting point")->delimiter(',');
    c->add_option("--t0", o.t0, "Start time");
    c->add_option("--t1", o.t1, "Final time");
    c->add_option("--paths", o.paths, "Number of paths");
    c->add_option("--dt", o.dt, "Step size; 0 means 0.01");
    c->add_option("--seed", o.seed, "Seed");
    c->add_option("--scheme", o.scheme, "exponential or euler_maruyama");
    c->add_option("--chunk", o.chunk, "Paths per random substream");
    c->add_flag("--antithetic", o.antithetic, "Mirror the noise in pairs");
    c->add_option("--save-times", o.save_times, "Snapshot times in (t0, t1]")->delimiter(',');
  };
  auto subject_args = [&](CLI::App* c) {
    c->add_option("--solution", o.solution, "Saved grid solution prefix; overrides --source");
    c->add_option("--source", o.source, "constant, kernel or pde");
    c->add_option("--pole", o.pole, "Kernel pole (space)")->delimiter(',');
    c->add_option("--t0", o.t0, "Kernel pole time");
    c->add_option("--lambda", o.lambda, "Kernel Gamma_K^lambda; 0 freezes A0 at the pole");
    c->add_option("--times", o.times, "Snapshot times")->delimiter(',');
    c->add_option("--widths", o.widths, "Regularisation widths for --source pde")->delimiter(',');
    c->add_option("--omega", o.omega, "Harnack omega");
    c->add_option("--R0", o.R0, "Harnack R0");
    grid_args(c);
    solve_args(c);
  };
  auto out_arg = [&](CLI::App* c, const std::string& help) { c->add_option("--out", o.out, help); };

  {
    auto* c = app.add_subcommand("structure", "Canonical form and hypoellipticity of a spec");
    c->fallthrough();
    spec_arg(c);
    out_arg(c, "Write the report here instead of stdout");
    cmds.push_back({c, "structure", "structure", cmd_structure});
  }
  {
    auto* k = app.add_subcommand("kernel", "Principal-part kernel");
    k->fallthrough();
    k->require_subcommand(1);
    auto* e = leaf(k, "eval", "Evaluate Gamma_K on points or a grid (CSV)");
    spec_arg(e);
    e->add_option("--pole", o.pole, "Pole y")->delimiter(',');
    e->add_option("--t0", o.t0, "Pole time");
    e->add_option("--lambda", o.lambda, "Use Gamma_K^lambda; 0 freezes A0 at the pole");
    e->add_option("--points", o.points, "CSV of points x1..xN,t with a header row");
    e->add_option("--times", o.times, "Times for grid evaluation")->delimiter(',');
    grid_args(e);
    e->add_flag("--check-homogeneity", o.check_homogeneity, "Report the largest dilation defect instead");
    e->add_option("--samples", o.samples, "Samples for --check-homogeneity");
    e->add_option("--seed", o.seed, "Seed for --check-homogeneity");
    out_arg(e, "CSV path; metadata goes to <out>.json");
    cmds.push_back({e, "kernel eval", "kernel", cmd_kernel_eval});

    auto* r = leaf(k, "reproduce", "Chapman-Kolmogorov check at one configuration");
    spec_arg(r);
    r->add_option("--x", o.x, "Point x")->delimiter(',');
    r->add_option("--t", o.t, "Time t");
    r->add_option("--y", o.y, "Pole y")->delimiter(',');
    r->add_option("--t0", o.t0, "Pole time");
    r->add_option("--s", o.s, "Intermediate time");
    r->add_option("--lambda", o.lambda, "Use Gamma_K^lambda; 0 freezes A0 at the pole");
    cmds.push_back({r, "kernel reproduce", "kernel", cmd_kernel_reproduce});
  }
  {
    auto* sv = app.add_subcommand("solve", "Grid solvers");
    sv->fallthrough();
    sv->require_subcommand(1);
    auto* c = leaf(sv, "cauchy", "Cauchy problem from a datum field");
    spec_arg(c);
    c->add_option("--datum", o.datum, "Field descriptor (JSON) for the initial datum")->required();
    c->add_option("--t0", o.t0, "Initial time");
    c->add_option("--t1", o.t1, "Final time");
    c->add_option("--save-times", o.save_times, "Snapshot times")->delimiter(',');
    grid_args(c);
    solve_args(c);
    c->add_flag("--csv", o.csv, "Also write <out>.csv");
    out_arg(c, "Output prefix for <out>.json and <out>.bin");
    cmds.push_back({c, "solve cauchy", "solve", cmd_solve_cauchy});

    auto* f = leaf(sv, "fundamental", "Approximate fundamental solution");
    spec_arg(f);
    f->add_option("--pole", o.pole, "Pole x0")->delimiter(',');
    f->add_option("--t0", o.t0, "Pole time");
    f->add_option("--widths", o.widths, "Regularisation widths, decreasing")->delimiter(',');
    f->add_option("--times", o.times, "Snapshot times")->delimiter(',');
    grid_args(f);
    solve_args(f);
    f->add_flag("--csv", o.csv, "Also write <out>.csv");
    out_arg(f, "Output prefix for <out>.json and <out>.bin");
    cmds.push_back({f, "solve fundamental", "solve", cmd_solve_fundamental});
  }
  {
    auto* mc = app.add_subcommand("mc", "Monte-Carlo simulation");
    mc->fallthrough();
    mc->require_subcommand(1);
    auto* sim = leaf(mc, "simulate", "Simulate and save a path ensemble");
    spec_arg(sim);
    mc_args(sim);
    out_arg(sim, "Output prefix for <out>.json and <out>.bin");
    cmds.push_back({sim, "mc simulate", "mc", cmd_mc_simulate});

    auto* den = leaf(mc, "density", "Histogram density of one snapshot (CSV)");
    spec_arg(den, false);
    den->add_option("--ensemble", o.ensemble, "Saved ensemble prefix instead of simulating");
    mc_args(den);
    den->add_option("--snapshot", o.snapshot, "Snapshot index; -1 is the last");
    den->add_option("--bins", o.bins, "Bins per axis")->delimiter(',');
    den->add_option("--range", o.range, "lo,hi per axis; default the data range")->delimiter(',');
    den->add_flag("--smooth", o.smooth, "Gaussian smoothing with Scott bandwidth");
    den->add_flag("--unnormalized", o.unnormalized, "Divide by the path count, not the total weight");
    out_arg(den, "CSV path; metadata goes to <out>.json");
    cmds.push_back({den, "mc density", "mc", cmd_mc_density});

    auto* ms = leaf(mc, "mass", "Mass inside D_R, or the volume of D_R with --taus");
    spec_arg(ms, false);
    ms->add_option("--ensemble", o.ensemble, "Saved ensemble prefix instead of simulating");
    mc_args(ms);
    ms->add_option("--snapshot", o.snapshot, "Snapshot index; -1 is the last");
    ms->add_option("--R", o.R, "Radius R");
    ms->add_option("--taus", o.taus, "Measure D_R(y, tau) for these tau instead")->delimiter(',');
    ms->add_option("--y", o.y, "Centre y of D_R for --taus")->delimiter(',');
    ms->add_option("--trials", o.trials, "Samples per tau for --taus");
    out_arg(ms, "Write the report here instead of stdout");
    cmds.push_back({ms, "mc mass", "mc", cmd_mc_mass});
  }
  {
    auto* c = app.add_subcommand("mollify", "Mollify a coefficient and report its ellipticity and L1 gap");
    c->fallthrough();
    spec_arg(c);
    c->add_option("--field", o.field, "A0, b, c or a");
    c->add_option("--eps", o.eps, "Mollification radii")->delimiter(',');
    grid_args(c);
    c->add_option("--samples", o.samples, "Random sample points");
    c->add_option("--cells", o.cells, "Cells per axis for the L1 distance");
    c->add_option("--seed", o.seed, "Seed for the sample points");
    out_arg(c, "Write the report here instead of stdout");
    cmds.push_back({c, "mollify", "mollify", cmd_mollify});
  }
  {
    auto* ck = app.add_subcommand("check", "Property checks");
    ck->fallthrough();
    ck->require_subcommand(1);
    auto* b = leaf(ck, "bounds", "Gaussian sandwich fit");
    spec_arg(b);
    b->add_option("--source", o.source, "kernel, pde or mc");
    b->add_option("--pole", o.pole, "Pole x0")->delimiter(',');
    b->add_option("--t0", o.t0, "Pole time");
    b->add_option("--lambda", o.lambda, "Kernel for --source kernel; 0 freezes A0 at the pole");
    b->add_option("--times", o.times, "Sample times")->delimiter(',');
    b->add_option("--widths", o.widths, "Regularisation widths for --source pde")->delimiter(',');
    b->add_option("--half", o.half, "Half-widths of the bulk box around the pole")->delimiter(',');
    b->add_option("--floor", o.floor, "Absolute error floor for --source pde");
    b->add_option("--lambda-grid", o.lambda_grid, "Candidate lambda values")->delimiter(',');
    b->add_option("--paths", o.paths, "Paths for --source mc");
    b->add_option("--seed", o.seed, "Seed for --source mc");
    b->add_option("--bins", o.bins, "Bins per axis for --source mc")->delimiter(',');
    b->add_option("--t1", o.t1, "Simulation end for --source mc");
    grid_args(b);
    solve_args(b);
    out_arg(b, "Write the report here instead of stdout");
    cmds.push_back({b, "check bounds", "check", cmd_check_bounds});

    auto* h = leaf(ck, "harnack", "Local Harnack quotient, or a sweep (CSV)");
    spec_arg(h);
    subject_args(h);
    h->add_option("--center", o.center, "Centre x..,t")->delimiter(',');
    h->add_option("--r", o.r, "Radius");
    h->add_flag("--sweep", o.sweep, "Sweep a lattice of centres and radii");
    h->add_option("--lattice", o.lattice, "Lattice points per axis for --sweep");
    h->add_option("--center-times", o.center_times, "Centre times for --sweep")->delimiter(',');
    h->add_option("--radii", o.radii, "Radii for --sweep")->delimiter(',');
    out_arg(h, "Report path (CSV with --sweep, metadata in <out>.json)");
    cmds.push_back({h, "check harnack", "check", cmd_check_harnack});

    auto* cn = leaf(ck, "cone", "Sup over the forward cone against the vertex value");
    spec_arg(cn);
    subject_args(cn);
    cn->add_option("--vertex", o.vertex, "Vertex x..,t")->delimiter(',')->required();
    cn->add_option("--R", o.R, "Cone radius R");
    cn->add_option("--C-probe", o.C_probe, "Constant to test; 0 only reports");
    out_arg(cn, "Write the report here instead of stdout");
    cmds.push_back({cn, "check cone", "check", cmd_check_cone});

    auto* gl = leaf(ck, "global", "Smallest global Harnack constant over the stored nodes");
    spec_arg(gl);
    subject_args(gl);
    gl->add_option("--x", o.x, "Base point x")->delimiter(',');
    gl->add_option("--t", o.t, "Base time");
    out_arg(gl, "Write the report here instead of stdout");
    cmds.push_back({gl, "check global", "check", cmd_check_global});
  }
  {
    auto* ex = app.add_subcommand("example", "Worked examples");
    ex->fallthrough();
    ex->require_subcommand(1);
    auto* a = leaf(ex, "asian", "Geometric-average Asian option by kernel quadrature and Monte Carlo");
    a->add_option("--S0", o.asian.S0, "Spot price");
    a->add_option("--avg", o.asian.avg, "Geometric average over the elapsed window");
    a->add_option("--elapsed", o.asian.elapsed, "Averaging time already elapsed");
    a->add_option("--r", o.asian.r, "Interest rate");
    a->add_option("--sigma", o.asian.sigma, "Volatility");
    a->add_option("--maturity", o.asian.maturity, "Time to maturity");
    a->add_option("--strike", o.asian.strike, "Strike");
    a->add_option("--payoff", o.payoff, "call, put or unit");
    a->add_option("--paths", o.asian.paths, "Monte-Carlo paths");
    a->add_option("--dt", o.asian.dt, "Monte-Carlo step");
    a->add_option("--seed", o.asian.seed, "Seed");
    out_arg(a, "Write the report here instead of stdout");
    cmds.push_back({a, "example asian", "example", cmd_example_asian});
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  for (const auto& c : cmds) {
    if (!c.app->parsed()) continue;
    try {
      c.run(o, resolved_config(*c.app, c.name));
      return 0;
    } catch (const Error& e) {
      std::cerr << json{{"error", std::string(errc_name(e.code()))}, {"detail", e.what()}}.dump() << '\n';
      return exit_code(e.code(), c.family);
    } catch (const std::exception& e) {
      std::cerr << json{{"error", "Internal"}, {"detail", e.what()}}.dump() << '\n';
      return exit_code(Errc::internal_inconsistency, c.family);
    }
  }
  return 2;
}
