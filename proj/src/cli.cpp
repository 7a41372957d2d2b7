#include "openevt/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "openevt/errors.hpp"
#include "openevt/extremes.hpp"
#include "openevt/gev_fit.hpp"
#include "openevt/open_dynamics.hpp"
#include "openevt/ulam.hpp"

namespace openevt {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const char* kModule = "cli";
const char* kVersion = "0.1.0";

const std::vector<std::string> kPipelines = {"spectral",  "evd",        "theta",
                                             "dimension", "degenerate", "all"};

[[noreturn]] void schema_fail(const std::string& what) {
  fail("config_schema", kModule, what);
}

//----------------------------------------------------------------------
// CSV plumbing. Doubles are written in the shortest decimal form that
// round-trips; NaN becomes an empty field.
//----------------------------------------------------------------------

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt(int v) { return std::to_string(v); }

class CsvFile {
 public:
  CsvFile(const fs::path& path) : out_(path, std::ios::binary) {
    if (!out_) fail("io_error", kModule, "cannot write " + path.string());
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

json num_or_null(double v) { return std::isnan(v) ? json() : json(v); }

//----------------------------------------------------------------------
// Config loading.
//----------------------------------------------------------------------

const json& need_key(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end())
    schema_fail(std::string("missing required key '") + key + "'");
  return *it;
}

double need_number(const json& j, const char* key) {
  const json& v = need_key(j, key);
  if (!v.is_number())
    schema_fail(std::string("key '") + key + "' must be a number");
  return v.get<double>();
}

int need_int(const json& j, const char* key) {
  const json& v = need_key(j, key);
  if (!v.is_number_integer())
    schema_fail(std::string("key '") + key + "' must be an integer");
  return v.get<int>();
}

bool need_bool(const json& j, const char* key) {
  const json& v = need_key(j, key);
  if (!v.is_boolean())
    schema_fail(std::string("key '") + key + "' must be a boolean");
  return v.get<bool>();
}

}  // namespace

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) schema_fail("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    schema_fail(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) schema_fail("config root must be a JSON object");

  static const std::vector<std::string> known = {
      "map",  "hole",        "z",    "tau_grid", "n_values",
      "bins", "markov_mode", "seed", "n_particles",
      "d_const", "p_max", "out_dir", "pipeline"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      schema_fail("unknown key '" + it.key() + "'");

  ExperimentConfig cfg;

  const json& m = need_key(j, "map");
  if (!m.is_object()) schema_fail("'map' must be an object");
  if (m.contains("builtin")) {
    if (!m["builtin"].is_string())
      schema_fail("'map.builtin' must be a string");
    cfg.builtin = m["builtin"].get<std::string>();
    if (m.contains("slopes")) {
      if (!m["slopes"].is_array())
        schema_fail("'map.slopes' must be an array of numbers");
      for (const json& s : m["slopes"]) {
        if (!s.is_number()) schema_fail("'map.slopes' entries must be numbers");
        cfg.slopes.push_back(s.get<double>());
      }
    }
    for (auto it = m.begin(); it != m.end(); ++it)
      if (it.key() != "builtin" && it.key() != "slopes")
        schema_fail("unknown key 'map." + it.key() + "'");
  } else if (m.contains("branches")) {
    if (!m["branches"].is_array() || m["branches"].empty())
      schema_fail("'map.branches' must be a nonempty array");
    for (const json& b : m["branches"]) {
      if (!b.is_object()) schema_fail("map branches must be objects");
      const json& dom = need_key(b, "domain");
      if (!dom.is_array() || dom.size() != 2 || !dom[0].is_number() ||
          !dom[1].is_number())
        schema_fail("branch 'domain' must be [lo, hi]");
      BranchSpec spec;
      spec.lo = dom[0].get<double>();
      spec.hi = dom[1].get<double>();
      spec.slope = need_number(b, "slope");
      spec.offset = need_number(b, "offset");
      for (auto it = b.begin(); it != b.end(); ++it)
        if (it.key() != "domain" && it.key() != "slope" &&
            it.key() != "offset")
          schema_fail("unknown branch key '" + it.key() + "'");
      cfg.branches.push_back(spec);
    }
  } else {
    schema_fail("'map' needs either 'builtin' or 'branches'");
  }

  const json& h = need_key(j, "hole");
  if (!h.is_array()) schema_fail("'hole' must be an array of [lo, hi] pairs");
  for (const json& iv : h) {
    if (!iv.is_array() || iv.size() != 2 || !iv[0].is_number() ||
        !iv[1].is_number())
      schema_fail("hole entries must be [lo, hi] number pairs");
    cfg.hole.push_back(Interval{iv[0].get<double>(), iv[1].get<double>()});
  }

  cfg.z = need_number(j, "z");
  const json& taus = need_key(j, "tau_grid");
  if (!taus.is_array()) schema_fail("'tau_grid' must be an array of numbers");
  for (const json& t : taus) {
    if (!t.is_number()) schema_fail("'tau_grid' entries must be numbers");
    cfg.tau_grid.push_back(t.get<double>());
  }
  const json& ns = need_key(j, "n_values");
  if (!ns.is_array()) schema_fail("'n_values' must be an array of integers");
  for (const json& n : ns) {
    if (!n.is_number_integer())
      schema_fail("'n_values' entries must be integers");
    cfg.n_values.push_back(n.get<int>());
  }
  cfg.bins = need_int(j, "bins");
  cfg.markov_mode = need_bool(j, "markov_mode");
  cfg.n_particles = need_int(j, "n_particles");

  // Seeds are mandatory: reproducibility forbids an entropy fallback.
  const json& seed = need_key(j, "seed");
  if (!seed.is_number_integer() || seed.get<double>() < 0)
    schema_fail("'seed' must be a nonnegative integer");
  cfg.seed = seed.get<std::uint64_t>();

  if (j.contains("d_const")) cfg.d_const = need_number(j, "d_const");
  if (j.contains("p_max")) cfg.p_max = need_int(j, "p_max");
  if (j.contains("out_dir")) {
    if (!j["out_dir"].is_string()) schema_fail("'out_dir' must be a string");
    cfg.out_dir = j["out_dir"].get<std::string>();
  }
  if (j.contains("pipeline")) {
    if (!j["pipeline"].is_string()) schema_fail("'pipeline' must be a string");
    cfg.pipeline = j["pipeline"].get<std::string>();
  }
  return cfg;
}

PiecewiseExpandingMap build_map_from_config(const ExperimentConfig& cfg) {
  if (cfg.builtin == "doubling") return make_doubling();
  if (cfg.builtin == "tent") return make_tent();
  if (cfg.builtin == "linear_markov") return make_linear_markov(cfg.slopes);
  if (!cfg.builtin.empty())
    schema_fail("unknown builtin map '" + cfg.builtin + "'");
  std::vector<Branch> branches;
  for (const BranchSpec& spec : cfg.branches) {
    Branch b;
    b.domain = Interval{spec.lo, spec.hi};
    b.affine = true;
    b.slope = spec.slope;
    b.offset = spec.offset;
    b.increasing = spec.slope > 0.0;
    branches.push_back(b);
  }
  return make_map(std::move(branches));
}

namespace {

IntervalSet hole_set(const ExperimentConfig& cfg) {
  return IntervalSet(cfg.hole);
}

std::string describe_target(const TargetSpec& cls) {
  std::string s = target_class_name(cls.cls);
  if (cls.cls == TargetClass::periodic)
    s += "(" + std::to_string(cls.period) + ")";
  return s;
}

}  // namespace

//----------------------------------------------------------------------
// Validation.
//----------------------------------------------------------------------

std::vector<Diagnostic> validate_config(const ExperimentConfig& cfg) {
  std::vector<Diagnostic> out;
  auto fatal = [&](const std::string& name, const std::string& msg) {
    out.push_back({true, name, msg});
  };
  auto note = [&](const std::string& name, const std::string& msg) {
    out.push_back({false, name, msg});
  };
  auto has_fatal = [&]() {
    return std::any_of(out.begin(), out.end(),
                       [](const Diagnostic& d) { return d.fatal; });
  };

  PiecewiseExpandingMap map;
  bool have_map = false;
  try {
    map = build_map_from_config(cfg);
    have_map = true;
  } catch (const NamedError& e) {
    fatal(e.name(), e.what());
  }

  // Hole intervals: inside [0,1], nondegenerate, pairwise disjoint,
  // total measure below 1. An empty list (closed system) is allowed.
  bool holes_ok = true;
  double total = 0.0;
  for (const Interval& iv : cfg.hole) {
    if (!(iv.lo >= 0.0 && iv.hi <= 1.0 && iv.lo < iv.hi)) {
      fatal("config_schema",
            "hole interval [" + fmt(iv.lo) + ", " + fmt(iv.hi) +
                ") must satisfy 0 <= lo < hi <= 1");
      holes_ok = false;
    }
    total += iv.hi - iv.lo;
  }
  if (holes_ok && !cfg.hole.empty()) {
    std::vector<Interval> sorted = cfg.hole;
    std::sort(sorted.begin(), sorted.end(),
              [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
    for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
      if (sorted[i + 1].lo < sorted[i].hi) {
        fatal("config_schema", "hole intervals overlap");
        holes_ok = false;
      }
    if (holes_ok && !(total < 1.0))
      fatal("config_schema", "hole measure " + fmt(total) + " must be < 1");
  }

  if (!(std::isfinite(cfg.z) && cfg.z >= 0.0 && cfg.z < 1.0))
    fatal("config_schema", "target z = " + fmt(cfg.z) + " must be in [0, 1)");
  if (cfg.tau_grid.empty()) fatal("config_schema", "tau_grid is empty");
  for (double t : cfg.tau_grid)
    if (!(std::isfinite(t) && t > 0.0)) {
      fatal("config_schema", "tau_grid entries must be positive");
      break;
    }
  if (cfg.n_values.empty()) fatal("config_schema", "n_values is empty");
  for (std::size_t i = 0; i < cfg.n_values.size(); ++i) {
    if (cfg.n_values[i] < 1) {
      fatal("config_schema", "n_values entries must be >= 1");
      break;
    }
    if (i > 0 && cfg.n_values[i] <= cfg.n_values[i - 1]) {
      fatal("config_schema", "n_values must be strictly increasing");
      break;
    }
  }
  if (cfg.bins < 2) fatal("config_schema", "bins must be >= 2");
  if (cfg.n_particles < 1) fatal("config_schema", "n_particles must be >= 1");
  if (!(cfg.d_const > 1.0))
    fatal("config_schema", "d_const = " + fmt(cfg.d_const) + " must be > 1");
  if (cfg.p_max < 1) fatal("config_schema", "p_max must be >= 1");
  if (std::find(kPipelines.begin(), kPipelines.end(), cfg.pipeline) ==
      kPipelines.end())
    fatal("config_schema", "unknown pipeline '" + cfg.pipeline + "'");

  if (!have_map || has_fatal()) return out;

  // Continuity of the iterates at z: zero distance to the singular set
  // means some T^n is discontinuous at z and levels are ill-defined.
  const double d_sing = singular_set_distance(map, cfg.z, 8);
  if (d_sing <= 0.0) {
    fatal("ambiguous_point",
          "z = " + fmt(cfg.z) +
              " lies on the singular set; the iterates of the map are not "
              "continuous at z");
    return out;
  }
  if (d_sing < 1e-6)
    note("continuity_flag",
         "z is within " + fmt(d_sing) +
             " of the singular set; deep level balls will straddle a "
             "discontinuity");
  else
    note("singular_set_distance",
         "distance from z to the singular set (depth 8): " + fmt(d_sing));

  // Dynamic checks on a capped solve.
  try {
    OpenSystem sys = make_open_system(map, hole_set(cfg));
    const BinPartition part =
        build_partition(sys, std::min(cfg.bins, 2048), cfg.markov_mode);
    const SpectralSolution sol = spectral_solution(sys, part);
    note("alpha", "leading eigenvalue alpha = " + fmt(sol.alpha));

    const double mh = sys.hole.measure();
    if (mh > 0.0) {
      const double closeness = check_operator_closeness(sys, part);
      const double c_hat = (1.0 - sol.alpha) / mh;
      note("operator_closeness",
           "1 - alpha = " + fmt(1.0 - sol.alpha) + ", operator gap " +
               fmt(closeness) + " <= m(H) = " + fmt(mh) +
               ", observed ratio C_hat = " + fmt(c_hat) + " (informational)");
    }
    if (!check_hole_smallness(sol, sys.map.beta, cfg.d_const))
      note("hole_smallness",
           "alpha = " + fmt(sol.alpha) + " does not exceed d_const / beta = " +
               fmt(cfg.d_const / sys.map.beta) +
               "; theta estimation is refused for periodic targets");

    const TargetSpec cls = classify_target(sys, cfg.z, cfg.p_max);
    note("classification",
         "target z = " + fmt(cfg.z) + " classified " + describe_target(cls));

    try {
      check_horizon_feasible(sol.alpha, cfg.n_particles,
                             cfg.n_values.back() - 1);
    } catch (const NamedError& e) {
      note("infeasible_horizon", e.what());
    }
  } catch (const NamedError& e) {
    fatal(e.name(), e.what());
  }
  return out;
}

//----------------------------------------------------------------------
// Pipelines. Each runner emits its files and fills a results object;
// named errors bubble to the caller, which records them.
//----------------------------------------------------------------------

namespace {

struct RunContext {
  const ExperimentConfig& cfg;
  const OpenSystem& sys;
  const BinPartition& part;
  const SpectralSolution& sol;
  const TargetSpec& cls;
  fs::path dir;
  int workers = 1;
  std::vector<std::string>* files = nullptr;
  json* warnings = nullptr;
  json* results = nullptr;
};

void add_warning(const RunContext& ctx, const std::string& name,
                 const std::string& message) {
  ctx.warnings->push_back({{"name", name}, {"message", message}});
}

void emit(const RunContext& ctx, const std::string& name) {
  ctx.files->push_back(name);
}

bool feasible_horizon(double alpha, long long n_particles, int horizon) {
  try {
    check_horizon_feasible(alpha, n_particles, horizon);
    return true;
  } catch (const NamedError&) {
    return false;
  }
}

void run_spectral_pipeline(const RunContext& ctx) {
  const SpectralSolution& sol = ctx.sol;
  {
    CsvFile f(ctx.dir / "escape.csv");
    f.row({"alpha", "escape_rate", "gap", "bins", "markov"});
    f.row({fmt(sol.alpha), fmt(escape_rate(sol.alpha)), fmt(sol.gap),
           fmt(ctx.part.bins()), ctx.part.markov_aligned ? "1" : "0"});
    emit(ctx, "escape.csv");
  }
  {
    CsvFile f(ctx.dir / "spectral.csv");
    f.row({"bin", "lo", "hi", "h0", "mu0", "lambda"});
    for (int i = 0; i < ctx.part.bins(); ++i)
      f.row({fmt(i), fmt(ctx.part.breakpoints[i]),
             fmt(ctx.part.breakpoints[i + 1]),
             fmt(sol.h0[static_cast<std::size_t>(i)]),
             fmt(sol.mu0[static_cast<std::size_t>(i)]),
             fmt(sol.lambda_weights[static_cast<std::size_t>(i)])});
    emit(ctx, "spectral.csv");
  }
  {
    const DiscretizedOperator op =
        build_operator(ctx.sys, ctx.part, OperatorVariant::open);
    CsvFile f(ctx.dir / "operator.csv");
    f.row({"i", "j", "value"});
    for (int i = 0; i < op.bins(); ++i)
      for (int idx = op.row_ptr[static_cast<std::size_t>(i)];
           idx < op.row_ptr[static_cast<std::size_t>(i) + 1]; ++idx)
        f.row({fmt(i), fmt(op.col[static_cast<std::size_t>(idx)]),
               fmt(op.val[static_cast<std::size_t>(idx)])});
    emit(ctx, "operator.csv");
  }
  (*ctx.results)["spectral"] = {{"alpha", ctx.sol.alpha},
                                {"escape_rate", escape_rate(ctx.sol.alpha)},
                                {"gap", ctx.sol.gap},
                                {"h_minus", ctx.sol.h_minus}};
}

void run_evd_pipeline(const RunContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  std::vector<int> ns = cfg.n_values;
  if (ctx.cls.cls != TargetClass::off_survivor) {
    std::vector<int> feasible;
    for (int n : ns)
      if (feasible_horizon(ctx.sol.alpha, cfg.n_particles, n - 1))
        feasible.push_back(n);
    if (feasible.empty())
      fail("infeasible_horizon", kModule,
           "no configured n keeps the expected survivor count above 100 at "
           "n_particles = " +
               fmt(cfg.n_particles));
    if (feasible.size() < ns.size())
      add_warning(ctx, "infeasible_horizon",
                  "dropped n > " + fmt(feasible.back()) +
                      " from the EVD curve: expected survivors fall below "
                      "100");
    ns = feasible;
  }
  const EvdRun run =
      build_evd_run(ctx.sys, ctx.sol, ctx.part, cfg.z, cfg.tau_grid.front(),
                    ns, cfg.n_particles, cfg.seed, ctx.workers);

  CsvFile f(ctx.dir / "evd_curve.csv");
  f.row({"n", "u_n", "radius", "p_mc", "stderr", "p_op"});
  for (std::size_t i = 0; i < run.n_values.size(); ++i) {
    std::string p_mc, se;
    if (i < run.mc.points.size()) {
      p_mc = fmt(run.mc.points[i].p_mc);
      se = fmt(run.mc.points[i].stderr_p);
    }
    f.row({fmt(run.n_values[i]), fmt(run.levels.u_n[i]),
           fmt(run.levels.radii[i]), p_mc, se, fmt(run.op_curve[i])});
  }
  emit(ctx, "evd_curve.csv");

  (*ctx.results)["evd"] = {
      {"tau", run.tau},
      {"degenerate", run.degenerate},
      {"n_hat", run.degenerate ? json(run.n_hat) : json()},
      {"theta_formula", num_or_null(run.theta_formula_value)}};
}

void run_theta_pipeline(const RunContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  if (ctx.cls.cls == TargetClass::periodic &&
      !check_hole_smallness(ctx.sol, ctx.sys.map.beta, cfg.d_const))
    fail("hole_smallness", kModule,
         "alpha = " + fmt(ctx.sol.alpha) +
             " does not exceed d_const / beta = " +
             fmt(cfg.d_const / ctx.sys.map.beta) +
             "; theta estimation refused for the periodic target z = " +
             fmt(cfg.z));

  const double deriv =
      ctx.cls.cls == TargetClass::periodic
          ? orbit_derivative(ctx.sys.map, cfg.z, ctx.cls.period)
          : 1.0;
  const double th_formula = theta_formula(ctx.cls, ctx.sol.alpha, deriv);

  const std::vector<double> spectral_radii = {1.0 / 32, 1.0 / 64, 1.0 / 128,
                                              1.0 / 256, 1.0 / 512};
  const SpectralTheta st =
      theta_spectral(ctx.sys, ctx.sol, ctx.part, cfg.z, spectral_radii);
  const double st_err = std::abs(
      st.estimate -
      st.spectrum.slope_estimates[static_cast<std::size_t>(st.used.back())]);

  const std::vector<double> return_radii = {1.0 / 1024, 1.0 / 2048,
                                            1.0 / 4096};
  const ReturnRatios rr =
      return_ratios(ctx.sys, ctx.sol, ctx.part, cfg.z,
                    std::max(ctx.cls.period, 1), 8, return_radii);
  double rr_gap = 0.0;
  const std::size_t last = rr.radii.size() - 1;
  for (int k = 0; k <= rr.k_max; ++k)
    rr_gap = std::max(rr_gap,
                      std::abs(rr.r_kn[static_cast<std::size_t>(k)][last] -
                               rr.r_kn[static_cast<std::size_t>(k)][last - 1]));
  {
    CsvFile f(ctx.dir / "returns.csv");
    f.row({"k", "radius", "r_kn", "q_kn"});
    for (int k = 0; k <= rr.k_max; ++k)
      for (std::size_t ri = 0; ri < rr.radii.size(); ++ri)
        f.row({fmt(k), fmt(rr.radii[ri]),
               fmt(rr.r_kn[static_cast<std::size_t>(k)][ri]),
               fmt(rr.q_kn[static_cast<std::size_t>(k)][ri])});
    emit(ctx, "returns.csv");
  }

  // Gumbel estimator at the largest feasible block length.
  std::optional<GumbelFit> gf;
  int n_fit = 0;
  for (auto it = cfg.n_values.rbegin(); it != cfg.n_values.rend(); ++it)
    if (*it >= 2 &&
        feasible_horizon(ctx.sol.alpha, cfg.n_particles, *it - 1)) {
      n_fit = *it;
      break;
    }
  if (n_fit == 0) {
    add_warning(ctx, "infeasible_horizon",
                "no configured n is feasible for the gumbel estimator; row "
                "omitted");
  } else {
    try {
      gf = theta_gumbel(ctx.sys, ctx.sol, cfg.z, n_fit, cfg.tau_grid,
                        cfg.n_particles, cfg.seed, ctx.workers);
    } catch (const NamedError& e) {
      add_warning(ctx, e.name(),
                  std::string("gumbel estimator skipped: ") + e.what());
    }
  }

  CsvFile f(ctx.dir / "theta.csv");
  f.row({"method", "estimate", "error"});
  f.row({"formula", fmt(th_formula), fmt(0.0)});
  f.row({"spectral", fmt(st.estimate), fmt(st_err)});
  f.row({"return", fmt(rr.theta_ret), fmt(rr_gap)});
  if (gf) f.row({"gumbel", fmt(gf->theta), fmt(gf->se_theta)});
  emit(ctx, "theta.csv");

  json res = {{"formula", th_formula},
              {"spectral", st.estimate},
              {"return", rr.theta_ret},
              {"classification", describe_target(ctx.cls)}};
  if (gf) {
    res["gumbel"] = gf->theta;
    res["gumbel_se"] = gf->se_theta;
    res["gumbel_n"] = gf->n;
  }
  (*ctx.results)["theta"] = res;
}

// Survival-conditioned prefixes for every block length in ns (all
// particles run to max(ns)); per-particle streams make the collection
// independent of the worker split.
std::vector<std::vector<std::vector<double>>> conditioned_prefixes(
    const OpenSystem& sys, const SpectralSolution& sol,
    const std::vector<int>& ns, int n_particles, std::uint64_t seed,
    int workers) {
  const int horizon = ns.back();
  const DensitySampler sampler(nu_weights(sys, sol), sol.partition);
  const int nw = std::max(1, std::min(workers, n_particles));
  std::vector<std::vector<std::vector<std::vector<double>>>> local(
      static_cast<std::size_t>(nw),
      std::vector<std::vector<std::vector<double>>>(ns.size()));

  std::exception_ptr worker_error;
  std::mutex error_mutex;
  auto body = [&](int w, int lo, int hi) {
    try {
      for (int p = lo; p < hi; ++p) {
        SplitMix64 rng = particle_stream(seed, static_cast<std::uint64_t>(p));
        double x = 0.0;
        bool found = false;
        for (int t = 0; t < 1000 && !found; ++t) {
          x = sampler.sample(rng);
          found = sys.x0.contains(x);
        }
        if (!found)
          fail("empty_density", "cli",
               "rejection sampling into the open region failed");
        const SurvivalResult sr = survival_simulate(sys, x, horizon);
        const int alive = sr.survived() ? horizon + 1 : sr.exit_time;
        for (std::size_t i = 0; i < ns.size(); ++i)
          if (alive >= ns[i])
            local[static_cast<std::size_t>(w)][i].emplace_back(
                sr.prefix.begin(), sr.prefix.begin() + ns[i]);
      }
    } catch (...) {
      const std::lock_guard<std::mutex> lock(error_mutex);
      if (!worker_error) worker_error = std::current_exception();
    }
  };
  if (nw == 1) {
    body(0, 0, n_particles);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < nw; ++w) {
      const int lo = static_cast<int>(
          static_cast<long long>(n_particles) * w / nw);
      const int hi = static_cast<int>(
          static_cast<long long>(n_particles) * (w + 1) / nw);
      pool.emplace_back(body, w, lo, hi);
    }
    for (std::thread& t : pool) t.join();
  }
  if (worker_error) std::rethrow_exception(worker_error);

  std::vector<std::vector<std::vector<double>>> merged(ns.size());
  for (int w = 0; w < nw; ++w)
    for (std::size_t i = 0; i < ns.size(); ++i)
      for (std::vector<double>& traj : local[static_cast<std::size_t>(w)][i])
        merged[i].push_back(std::move(traj));
  return merged;
}

void run_dimension_pipeline(const RunContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const BoundaryLevels lv =
      boundary_levels(ctx.sol, cfg.z, cfg.tau_grid.front(), cfg.n_values);
  const DimensionEstimate dim = local_dimension(ctx.sol, cfg.z, lv.u_n);
  {
    CsvFile f(ctx.dir / "dimension.csv");
    f.row({"u_n", "lambda_mass", "d_n", "t0_hat"});
    for (std::size_t i = 0; i < dim.u_values.size(); ++i)
      f.row({fmt(dim.u_values[i]), fmt(dim.lambda_mass[i]), fmt(dim.d_n[i]),
             fmt(dim.t0_hat)});
    emit(ctx, "dimension.csv");
  }

  // Conditioned GEV ladder: block lengths from n_values that are long
  // enough for a block and keep >= 400 expected survivors.
  std::vector<int> gns;
  for (int n : cfg.n_values)
    if (n >= 16 && static_cast<double>(cfg.n_particles) *
                           std::pow(ctx.sol.alpha, n - 1) >=
                       400.0)
      gns.push_back(n);
  json gev_res = json();
  if (gns.empty()) {
    add_warning(ctx, "insufficient_data",
                "no configured block length is both >= 16 and feasible; "
                "gev.csv omitted");
  } else {
    const auto trajs = conditioned_prefixes(ctx.sys, ctx.sol, gns,
                                            cfg.n_particles, cfg.seed,
                                            ctx.workers);
    std::vector<int> good_ns;
    std::vector<GevFit> fits;
    for (std::size_t i = 0; i < gns.size(); ++i) {
      try {
        fits.push_back(fit_gev(block_maxima(trajs[i], cfg.z, gns[i])));
        good_ns.push_back(gns[i]);
      } catch (const NamedError& e) {
        add_warning(ctx, e.name(),
                    "gev fit skipped at n = " + fmt(gns[i]) + ": " + e.what());
      }
    }
    if (!good_ns.empty()) {
      const NormalizingSequences seq = normalizing_sequences(fits, good_ns);
      CsvFile f(ctx.dir / "gev.csv");
      f.row({"n", "location", "scale", "shape", "a_n", "b_n"});
      for (std::size_t i = 0; i < good_ns.size(); ++i)
        f.row({fmt(good_ns[i]), fmt(fits[i].location), fmt(fits[i].scale),
               fmt(fits[i].shape), fmt(seq.a_n[i]), fmt(seq.b_n[i])});
      emit(ctx, "gev.csv");
      gev_res = {{"n_values", good_ns},
                 {"a_n", seq.a_n},
                 {"b_n", seq.b_n}};
    }
  }
  (*ctx.results)["dimension"] = {{"t0_hat", dim.t0_hat},
                                 {"hd_lower_bound", dim.hd_lower_bound},
                                 {"atom_flag", dim.atom_flag},
                                 {"fdd_sup", dim.fdd_sup},
                                 {"gev", gev_res}};
}

void run_degenerate_pipeline(const RunContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  const DegenerateProbe dp =
      degenerate_probe(ctx.sys, ctx.sol, ctx.part, cfg.z, cfg.n_values);
  const DistanceEstimate de = distance_estimate(ctx.sys, ctx.sol, cfg.z);
  CsvFile f(ctx.dir / "degenerate.csv");
  f.row({"n", "u_n", "p_op"});
  for (std::size_t i = 0; i < dp.n_values.size(); ++i)
    f.row({fmt(dp.n_values[i]), fmt(dp.u_n[i]), fmt(dp.curve[i])});
  emit(ctx, "degenerate.csv");
  (*ctx.results)["degenerate"] = {{"n_hat", de.n_hat},
                                  {"distance_estimate", de.estimate},
                                  {"exact_distance", de.exact_distance}};
}

json config_echo(const ExperimentConfig& cfg) {
  json map;
  if (!cfg.builtin.empty()) {
    map["builtin"] = cfg.builtin;
    if (!cfg.slopes.empty()) map["slopes"] = cfg.slopes;
  } else {
    json branches = json::array();
    for (const BranchSpec& b : cfg.branches)
      branches.push_back({{"domain", {b.lo, b.hi}},
                          {"slope", b.slope},
                          {"offset", b.offset}});
    map["branches"] = branches;
  }
  json hole = json::array();
  for (const Interval& iv : cfg.hole) hole.push_back({iv.lo, iv.hi});
  return {{"map", map},
          {"hole", hole},
          {"z", cfg.z},
          {"tau_grid", cfg.tau_grid},
          {"n_values", cfg.n_values},
          {"bins", cfg.bins},
          {"markov_mode", cfg.markov_mode},
          {"n_particles", cfg.n_particles},
          {"seed", cfg.seed},
          {"d_const", cfg.d_const},
          {"p_max", cfg.p_max},
          {"pipeline", cfg.pipeline}};
}

void print_diagnostics(const std::vector<Diagnostic>& diags) {
  json arr = json::array();
  for (const Diagnostic& d : diags)
    arr.push_back(
        {{"fatal", d.fatal}, {"name", d.name}, {"message", d.message}});
  std::cout << arr.dump(2) << "\n";
}

}  // namespace

//----------------------------------------------------------------------
// Runner.
//----------------------------------------------------------------------

int run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                   int workers) {
  const std::vector<Diagnostic> diags = validate_config(cfg);
  std::vector<Diagnostic> fatals;
  for (const Diagnostic& d : diags)
    if (d.fatal) fatals.push_back(d);
  if (!fatals.empty()) {
    print_diagnostics(fatals);
    return 2;
  }
  if (out_dir.empty()) {
    print_diagnostics({{true, "config_schema", "no output directory given"}});
    return 2;
  }

  const auto t_start = std::chrono::steady_clock::now();
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  const PiecewiseExpandingMap map = build_map_from_config(cfg);
  const OpenSystem sys = make_open_system(map, hole_set(cfg));
  const BinPartition part = build_partition(sys, cfg.bins, cfg.markov_mode);
  const SpectralSolution sol = spectral_solution(sys, part);
  const TargetSpec cls = classify_target(sys, cfg.z, cfg.p_max);

  std::vector<std::string> files;
  json warnings = json::array();
  json errors = json::array();
  json results = json::object();
  for (const Diagnostic& d : diags)
    if (!d.fatal)
      warnings.push_back({{"name", d.name}, {"message", d.message}});

  std::vector<std::string> selected;
  if (cfg.pipeline == "all") {
    selected = {"spectral", "evd"};
    if (cls.cls == TargetClass::off_survivor)
      selected.push_back("degenerate");
    else {
      selected.push_back("theta");
      selected.push_back("dimension");
    }
  } else {
    selected = {cfg.pipeline};
  }

  RunContext ctx{cfg,     sys,    part,      sol,     cls,
                 dir,     workers, &files,   &warnings, &results};
  for (const std::string& name : selected) {
    try {
      if (name == "spectral")
        run_spectral_pipeline(ctx);
      else if (name == "evd")
        run_evd_pipeline(ctx);
      else if (name == "theta")
        run_theta_pipeline(ctx);
      else if (name == "dimension")
        run_dimension_pipeline(ctx);
      else
        run_degenerate_pipeline(ctx);
    } catch (const NamedError& e) {
      errors.push_back({{"name", e.name()},
                        {"module", e.module_name()},
                        {"pipeline", name},
                        {"message", e.what()}});
    }
  }

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                    t_start)
          .count();
  files.push_back("manifest.json");
  json manifest = {{"tool", "openevt"},
                   {"version", kVersion},
                   {"config", config_echo(cfg)},
                   {"seed", cfg.seed},
                   {"pipeline", cfg.pipeline},
                   {"workers", workers},
                   {"classification", describe_target(cls)},
                   {"alpha", sol.alpha},
                   {"escape_rate", escape_rate(sol.alpha)},
                   {"wall_clock_seconds", secs},
                   {"files", files},
                   {"warnings", warnings},
                   {"errors", errors},
                   {"results", results}};
  {
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf)
      fail("io_error", kModule,
           "cannot write " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << "\n";
  }
  std::cout << "manifest: " << (dir / "manifest.json").string() << "\n";
  return errors.empty() ? 0 : 1;
}

//----------------------------------------------------------------------
// Argument parsing.
//----------------------------------------------------------------------

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"extreme value statistics for open interval maps"};
  app.require_subcommand(1);

  std::string run_config, out_dir, pipeline;
  int workers = 0;
  CLI::App* run = app.add_subcommand("run", "execute configured pipelines");
  run->add_option("--config", run_config, "JSON config file")->required();
  run->add_option("--out", out_dir,
                  "output directory (falls back to the config's out_dir)");
  run->add_option("--pipeline", pipeline,
                  "spectral|evd|theta|dimension|degenerate|all");
  run->add_option("--workers", workers,
                  "worker threads (fallback: OPENEVT_WORKERS, then 1)");

  std::string val_config;
  CLI::App* val =
      app.add_subcommand("validate", "check a config without running");
  val->add_option("--config", val_config, "JSON config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (val->parsed()) {
      const ExperimentConfig cfg = load_config(val_config);
      const std::vector<Diagnostic> diags = validate_config(cfg);
      print_diagnostics(diags);
      const bool bad = std::any_of(diags.begin(), diags.end(),
                                   [](const Diagnostic& d) { return d.fatal; });
      return bad ? 2 : 0;
    }
    ExperimentConfig cfg = load_config(run_config);
    if (!pipeline.empty()) cfg.pipeline = pipeline;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (cfg.out_dir.empty()) {
      print_diagnostics({{true, "config_schema",
                          "no output directory: pass --out or set out_dir"}});
      return 2;
    }
    int w = workers;
    if (w <= 0) {
      if (const char* env = std::getenv("OPENEVT_WORKERS")) w = std::atoi(env);
    }
    if (w <= 0) w = 1;
    return run_experiment(cfg, cfg.out_dir, w);
  } catch (const NamedError& e) {
    print_diagnostics({{true, e.name(), e.what()}});
    return 2;
  }
}

}  // namespace openevt
