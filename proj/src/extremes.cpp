#include "openevt/extremes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "openevt/errors.hpp"
#include "openevt/open_dynamics.hpp"

namespace openevt {

namespace {
const char* kModule = "extremes";

double ball_mass_interp(const SpectralSolution& sol, double z, double r) {
  if (!(r > 0.0)) return 0.0;
  return lambda_measure_interp(sol, IntervalSet(Interval{z - r, z + r}));
}
}  // namespace

double observable_phi(double x, double z) {
  const double d = std::abs(x - z);
  if (d == 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(d);
}

//----------------------------------------------------------------------
// Boundary levels.
//----------------------------------------------------------------------

BoundaryLevels boundary_levels(const SpectralSolution& sol, double z,
                               double tau, const std::vector<int>& n_values) {
  if (!(z >= 0.0 && z <= 1.0))
    fail("domain_error", kModule, "target z outside [0,1]");
  if (!(tau > 0.0) || !std::isfinite(tau))
    fail("domain_error", kModule, "tau must be positive and finite");
  if (n_values.empty()) fail("domain_error", kModule, "empty n grid");
  for (int n : n_values)
    if (n < 1) fail("domain_error", kModule, "levels need n >= 1");

  if (!(ball_mass_interp(sol, z, 1e-9) > 0.0))
    fail("off_support", kModule,
         "Lambda carries no mass near the target; use the degenerate "
         "pipeline");

  BoundaryLevels out;
  out.z = z;
  out.tau = tau;
  out.n_values = n_values;
  const double r_max = std::max(z, 1.0 - z);
  for (int n : n_values) {
    const double target = tau / static_cast<double>(n);
    if (ball_mass_interp(sol, z, r_max) < target * (1.0 - 1e-12)) {
      std::ostringstream msg;
      msg << "Lambda mass cannot reach tau/n = " << target
          << " at the full radius";
      fail("off_support", kModule, msg.str());
    }
    // Lambda(B(z,r)) is continuous and nondecreasing in r, so bisection
    // brackets the level exactly.
    double lo = 0.0, hi = r_max;
    double r = r_max;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double f = ball_mass_interp(sol, z, mid) - target;
      if (std::abs(f) <= 1e-9 * target) {
        r = mid;
        break;
      }
      if (f < 0.0) {
        lo = mid;
      } else {
        hi = mid;
      }
      r = hi;
    }
    if (std::abs(static_cast<double>(n) * ball_mass_interp(sol, z, r) - tau) >
        1e-6 * tau)
      fail("discretization_tolerance", kModule,
           "bisection failed to meet n * Lambda(B) = tau within 1e-6 at n = " +
               std::to_string(n));
    out.radii.push_back(r);
    out.u_n.push_back(-std::log(r));
  }
  return out;
}

//----------------------------------------------------------------------
// Conditioned Monte Carlo with running minimum distance to the target.
//----------------------------------------------------------------------

namespace {

struct Milestone {
  int n = 0;
  std::vector<double> radii;
};

struct MilestoneCounts {
  long long survivors = 0;
  std::vector<long long> ok;
};

// Per particle: run to each milestone n (positions x_0..x_{n-1} inside
// X0), and record whether the running min distance to z clears each
// radius. M_n <= u  <=>  min_{i<n} |x_i - z| >= e^{-u}. Counts are
// integers keyed to (seed, particle), so any contiguous worker split
// merges to the same totals.
std::vector<MilestoneCounts> run_min_dist_counts(
    const OpenSystem& sys, const SpectralSolution& sol, double z,
    const std::vector<Milestone>& ms, int n_particles, std::uint64_t seed,
    int workers) {
  const DensitySampler sampler(nu_weights(sys, sol), sol.partition);
  const int nm = static_cast<int>(ms.size());

  auto blank = [&]() {
    std::vector<MilestoneCounts> acc(static_cast<std::size_t>(nm));
    for (int k = 0; k < nm; ++k)
      acc[static_cast<std::size_t>(k)].ok.assign(ms[static_cast<std::size_t>(k)].radii.size(), 0);
    return acc;
  };

  auto run_range = [&](int p_lo, int p_hi, std::vector<MilestoneCounts>& acc) {
    for (int p = p_lo; p < p_hi; ++p) {
      SplitMix64 rng = particle_stream(seed, static_cast<std::uint64_t>(p));
      double x = 0.0;
      bool found = false;
      for (int tries = 0; tries < 1000 && !found; ++tries) {
        x = sampler.sample(rng);
        found = sys.x0.contains(x);
      }
      if (!found)
        fail("empty_density", kModule,
             "rejection sampling failed: density concentrated on the hole");
      double min_d = std::abs(x - z);
      int steps = 0;
      bool alive = true;
      for (int mi = 0; mi < nm; ++mi) {
        const Milestone& m = ms[static_cast<std::size_t>(mi)];
        while (alive && steps < m.n - 1) {
          x = evaluate(sys.map, x);
          if (x >= 1.0) x = std::nextafter(1.0, 0.0);
          if (!sys.x0.contains(x)) {
            alive = false;
            break;
          }
          ++steps;
          min_d = std::min(min_d, std::abs(x - z));
        }
        if (!alive) break;
        MilestoneCounts& c = acc[static_cast<std::size_t>(mi)];
        c.survivors += 1;
        for (std::size_t j = 0; j < m.radii.size(); ++j)
          if (min_d >= m.radii[j]) c.ok[j] += 1;
      }
    }
  };

  std::vector<MilestoneCounts> total = blank();
  const int nw = std::max(1, workers);
  if (nw == 1) {
    run_range(0, n_particles, total);
  } else {
    std::vector<std::vector<MilestoneCounts>> parts(
        static_cast<std::size_t>(nw));
    std::vector<std::thread> pool;
    const int chunk = (n_particles + nw - 1) / nw;
    for (int w = 0; w < nw; ++w) {
      const int lo = w * chunk;
      const int hi = std::min(n_particles, lo + chunk);
      if (lo >= hi) break;
      parts[static_cast<std::size_t>(w)] = blank();
      pool.emplace_back(run_range, lo, hi,
                        std::ref(parts[static_cast<std::size_t>(w)]));
    }
    for (auto& th : pool) th.join();
    for (std::size_t w = 0; w < pool.size(); ++w)
      for (int k = 0; k < nm; ++k) {
        total[static_cast<std::size_t>(k)].survivors +=
            parts[w][static_cast<std::size_t>(k)].survivors;
        for (std::size_t j = 0; j < total[static_cast<std::size_t>(k)].ok.size(); ++j)
          total[static_cast<std::size_t>(k)].ok[j] +=
              parts[w][static_cast<std::size_t>(k)].ok[j];
      }
  }
  return total;
}

}  // namespace

McCurve empirical_evd(const OpenSystem& sys, const SpectralSolution& sol,
                      double z, const BoundaryLevels& levels, int n_particles,
                      std::uint64_t seed, int workers) {
  const std::size_t m = levels.n_values.size();
  if (m == 0 || levels.radii.size() != m || levels.u_n.size() != m)
    fail("domain_error", kModule, "inconsistent boundary levels");
  if (n_particles < 1)
    fail("domain_error", kModule, "need at least one particle");
  const int n_max =
      *std::max_element(levels.n_values.begin(), levels.n_values.end());
  check_horizon_feasible(sol.alpha, n_particles, n_max - 1);

  // Milestones ascend in n so one pass serves every level.
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return levels.n_values[a] < levels.n_values[b];
  });
  std::vector<Milestone> ms(m);
  for (std::size_t k = 0; k < m; ++k) {
    ms[k].n = levels.n_values[order[k]];
    ms[k].radii = {levels.radii[order[k]]};
  }

  const auto counts =
      run_min_dist_counts(sys, sol, z, ms, n_particles, seed, workers);

  McCurve curve;
  curve.points.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t slot = order[k];
    McCurvePoint pt;
    pt.n = ms[k].n;
    pt.u_n = levels.u_n[slot];
    pt.radius = levels.radii[slot];
    pt.survivors = counts[k].survivors;
    if (pt.survivors <= 0)
      fail("insufficient_survivors", kModule,
           "no conditioned survivors at n = " + std::to_string(pt.n));
    pt.p_mc = static_cast<double>(counts[k].ok[0]) /
              static_cast<double>(pt.survivors);
    pt.stderr_p = std::sqrt(std::max(
        0.0, pt.p_mc * (1.0 - pt.p_mc) / static_cast<double>(pt.survivors)));
    curve.points[slot] = pt;
  }
  return curve;
}

//----------------------------------------------------------------------
// Return ratios.
//----------------------------------------------------------------------

ReturnRatios return_ratios(const OpenSystem& sys, const SpectralSolution& sol,
                           const BinPartition& partition, double z, int p_hint,
                           int k_max, const std::vector<double>& radii) {
  if (k_max < 0) fail("domain_error", kModule, "k_max must be >= 0");
  if (p_hint < 0) fail("domain_error", kModule, "p_hint must be >= 0");
  if (radii.empty()) fail("domain_error", kModule, "empty radius grid");
  for (double r : radii)
    if (!(r > 0.0) || !(r < 1.0))
      fail("domain_error", kModule, "radii must lie in (0,1)");
  if (!(z > 0.0 && z < 1.0))
    fail("domain_error", kModule, "target z outside (0,1)");

  const int kk = std::max(k_max, p_hint);
  ReturnRatios out;
  out.k_max = kk;
  out.radii = radii;
  std::sort(out.radii.begin(), out.radii.end(), std::greater<double>());
  out.r_kn.assign(static_cast<std::size_t>(kk) + 1, {});
  out.q_kn.assign(static_cast<std::size_t>(kk) + 1, {});

  const int nb = partition.bins();
  const std::vector<double>& bp = partition.breakpoints;
  const DiscretizedOperator m0 =
      build_operator(sys, partition, OperatorVariant::open);
  const std::vector<double>& g = sol.dual;

  for (double r : out.radii) {
    // A ball crossing a branch boundary breaks the single-branch return
    // analysis; refuse rather than silently averaging branches.
    for (std::size_t b = 1; b < sys.map.branches.size(); ++b) {
      const double cut = sys.map.branches[b].domain.lo;
      if (cut > z - r && cut < z + r)
        fail("ball_too_large", kModule,
             "branch boundary " + std::to_string(cut) +
                 " inside the ball of radius " + std::to_string(r));
    }

    // Snap the ball to whole partition bins so both routes, interval
    // algebra and operator products, see the identical set J.
    int j_lo = -1, j_hi = -1;
    for (int i = 0; i < nb; ++i) {
      if (bp[i + 1] > z - r && bp[i] < z + r) {
        if (j_lo < 0) j_lo = i;
        j_hi = i;
      }
    }
    if (j_lo < 0) fail("off_support", kModule, "ball misses every bin");
    const Interval hull{bp[j_lo], bp[j_hi + 1]};
    const IntervalSet j_set{hull};
    const double lam_j = lambda_measure(sys, sol, j_set);
    if (!(lam_j > 0.0))
      fail("off_support", kModule,
           "Lambda(J) = 0 around the target; use the degenerate pipeline");

    // Interval route: S_k = J ∩ T^{-1}(R_k) with R_0 = J and
    // R_{k+1} = J^c ∩ T^{-1}(R_k), all via exact preimage algebra.
    const IntervalSet j_comp = j_set.complement();
    IntervalSet ret = j_set;
    for (int k = 0; k <= kk; ++k) {
      const IntervalSet pre = preimage_set(sys.map, ret);
      const IntervalSet s_k = j_set.intersect(pre);
      const double num = s_k.empty() ? 0.0 : lambda_measure(sys, sol, s_k);
      out.r_kn[static_cast<std::size_t>(k)].push_back(
          std::max(0.0, num / lam_j));
      ret = j_comp.intersect(pre);
    }

    // Operator route: q_k = <1_J, M0 Mt^k (1_J h0)> / <1_J, 1_J h0>
    // against the dual eigenvector; all normalizers cancel in the ratio.
    const DiscretizedOperator mt = build_operator(
        sys, partition, OperatorVariant::target_perturbed, hull);
    std::vector<double> u_j(static_cast<std::size_t>(nb), 0.0);
    double den = 0.0;
    for (int i = j_lo; i <= j_hi; ++i) {
      u_j[static_cast<std::size_t>(i)] = sol.h0[static_cast<std::size_t>(i)] *
                                         partition.width(i);
      den += u_j[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(i)];
    }
    if (!(den > 0.0))
      fail("off_support", kModule, "dual eigenvector vanishes on the ball");
    std::vector<double> v = m0.apply_mass(u_j);
    for (int k = 0; k <= kk; ++k) {
      if (k > 0) v = mt.apply_mass(v);
      double num = 0.0;
      for (int i = j_lo; i <= j_hi; ++i)
        num += v[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(i)];
      out.q_kn[static_cast<std::size_t>(k)].push_back(num / den);
    }
  }

  // Accept the smallest-radius column as the limit only when the two
  // finest radii already agree.
  const std::size_t last = out.radii.size() - 1;
  if (out.radii.size() >= 2) {
    for (int k = 0; k <= kk; ++k) {
      const double a = out.r_kn[static_cast<std::size_t>(k)][last];
      const double b = out.r_kn[static_cast<std::size_t>(k)][last - 1];
      if (std::abs(a - b) > 1e-3)
        fail("discretization_tolerance", kModule,
             "return ratio k = " + std::to_string(k) +
                 " unstable between the two smallest radii: " +
                 std::to_string(b) + " vs " + std::to_string(a));
    }
  }
  double sum = 0.0;
  for (int k = 0; k <= kk; ++k) {
    out.r_k.push_back(out.r_kn[static_cast<std::size_t>(k)][last]);
    sum += out.r_k.back();
  }
  out.theta_ret = 1.0 - sum;
  return out;
}

//----------------------------------------------------------------------
// Extremal-index estimators.
//----------------------------------------------------------------------

double theta_formula(const TargetSpec& target, double alpha, double deriv_p) {
  if (!(alpha > 0.0) || !(alpha <= 1.0))
    fail("domain_error", kModule, "theta formula needs alpha in (0,1]");
  switch (target.cls) {
    case TargetClass::nonperiodic:
      return 1.0;
    case TargetClass::off_survivor:
      fail("formula_domain", kModule,
           "extremal index undefined for an off-survivor target "
           "(degenerate limit law)");
    case TargetClass::periodic:
      break;
  }
  if (target.period < 1)
    fail("domain_error", kModule, "periodic target needs period >= 1");
  const double pre =
      std::pow(alpha, static_cast<double>(target.period)) * std::abs(deriv_p);
  if (!(pre > 1.0))
    fail("formula_domain", kModule,
         "alpha^p |(T^p)'(z)| = " + std::to_string(pre) +
             " must exceed 1 for the periodic formula");
  return 1.0 - 1.0 / pre;
}

SpectralTheta theta_spectral(const OpenSystem& sys,
                             const SpectralSolution& sol,
                             const BinPartition& partition, double z,
                             const std::vector<double>& radii) {
  if (radii.empty()) fail("domain_error", kModule, "empty radius grid");
  SpectralTheta out;
  out.spectrum = perturbed_eigenvalue_curve(sys, sol, partition, z, radii);

  // Resolution guard: the ball has to span at least 8 of the bins it
  // touches, otherwise the mask is dominated by partial-bin cut noise.
  for (std::size_t i = 0; i < out.spectrum.radii.size(); ++i) {
    const double r = out.spectrum.radii[i];
    double w_max = 0.0;
    for (int j = 0; j < partition.bins(); ++j) {
      const Interval b = partition.bin(j);
      if (b.hi > z - r && b.lo < z + r) w_max = std::max(w_max, b.hi - b.lo);
    }
    if (w_max > 0.0 && 2.0 * r >= 8.0 * w_max)
      out.used.push_back(static_cast<int>(i));
  }
  if (out.used.empty())
    fail("insufficient_data", kModule,
         "no radius spans 8 bins at this partition; refine the bins or "
         "enlarge the radii");

  if (out.used.size() == 1) {
    out.estimate =
        out.spectrum.slope_estimates[static_cast<std::size_t>(out.used[0])];
    return out;
  }
  // Slopes are linear in Delta to first order; extrapolate to Delta = 0.
  double xbar = 0.0, ybar = 0.0;
  for (int i : out.used) {
    xbar += out.spectrum.delta_n[static_cast<std::size_t>(i)];
    ybar += out.spectrum.slope_estimates[static_cast<std::size_t>(i)];
  }
  const double cnt = static_cast<double>(out.used.size());
  xbar /= cnt;
  ybar /= cnt;
  double sxx = 0.0, sxy = 0.0;
  for (int i : out.used) {
    const double dx = out.spectrum.delta_n[static_cast<std::size_t>(i)] - xbar;
    const double dy =
        out.spectrum.slope_estimates[static_cast<std::size_t>(i)] - ybar;
    sxx += dx * dx;
    sxy += dx * dy;
  }
  if (sxx <= 0.0) {
    out.estimate = ybar;
  } else {
    const double slope = sxy / sxx;
    out.estimate = ybar - slope * xbar;
  }
  return out;
}

GumbelFit theta_gumbel(const OpenSystem& sys, const SpectralSolution& sol,
                       double z, int n, const std::vector<double>& taus,
                       int n_particles, std::uint64_t seed, int workers) {
  if (n < 2) fail("domain_error", kModule, "Gumbel fit needs n >= 2");
  if (taus.size() < 2)
    fail("insufficient_data", kModule, "need at least two tau values");
  for (double t : taus)
    if (!(t > 0.0) || !std::isfinite(t))
      fail("domain_error", kModule, "tau values must be positive");
  if (n_particles < 1)
    fail("domain_error", kModule, "need at least one particle");
  check_horizon_feasible(sol.alpha, n_particles, n - 1);

  GumbelFit fit;
  fit.n = n;
  fit.taus = taus;
  for (double tau : taus) {
    const BoundaryLevels lv = boundary_levels(sol, z, tau, {n});
    fit.u_n.push_back(lv.u_n[0]);
    fit.radii.push_back(lv.radii[0]);
  }

  // One conditioned ensemble serves the whole tau grid: each tau is a
  // level threshold against the same running minimum distance.
  Milestone ms;
  ms.n = n;
  ms.radii = fit.radii;
  const auto counts =
      run_min_dist_counts(sys, sol, z, {ms}, n_particles, seed, workers);
  fit.survivors = counts[0].survivors;
  if (fit.survivors <= 0)
    fail("insufficient_survivors", kModule,
         "no conditioned survivors at n = " + std::to_string(n));
  for (std::size_t j = 0; j < taus.size(); ++j) {
    const double p = static_cast<double>(counts[0].ok[j]) /
                     static_cast<double>(fit.survivors);
    fit.p_mc.push_back(p);
    fit.stderr_p.push_back(std::sqrt(
        std::max(0.0, p * (1.0 - p) / static_cast<double>(fit.survivors))));
  }

  // Weighted least squares of -log p against tau; the delta-method
  // variance of -log p is (1-p)/(p N), so weights are p N / (1-p).
  double sw = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  int used = 0;
  for (std::size_t j = 0; j < taus.size(); ++j) {
    const double p = fit.p_mc[j];
    if (p <= 1e-12 || p >= 1.0 - 1e-12) continue;
    const double w =
        static_cast<double>(fit.survivors) * p / (1.0 - p);
    const double x = taus[j];
    const double y = -std::log(p);
    sw += w;
    sx += w * x;
    sy += w * y;
    sxx += w * x * x;
    sxy += w * x * y;
    ++used;
  }
  if (used < 2)
    fail("insufficient_data", kModule,
         "fewer than two tau points with nondegenerate probabilities");
  const double det = sw * sxx - sx * sx;
  if (!(det > 0.0))
    fail("insufficient_data", kModule, "degenerate tau grid");
  fit.theta = (sw * sxy - sx * sy) / det;
  fit.intercept = (sxx * sy - sx * sxy) / det;
  fit.se_theta = std::sqrt(sw / det);
  fit.se_intercept = std::sqrt(sxx / det);
  return fit;
}

//----------------------------------------------------------------------
// Degenerate pipeline.
//----------------------------------------------------------------------

namespace {

// First n >= 1 with the open ball B(z, 1/n) disjoint from the depth-20
// survivor approximation, i.e. the smallest n with 1/n <= dist.
int first_disjoint_n(const OpenSystem& sys, double z, double* dist_out) {
  const IntervalSet x20 = survivor_approx(sys, 20);
  const double d = x20.distance_to(z);
  if (dist_out != nullptr) *dist_out = d;
  if (!(d > 0.0))
    fail("classification_mismatch", kModule,
         "target touches the survivor approximation");
  if (d < 1e-9)
    fail("discretization_tolerance", kModule,
         "target indistinguishably close to the survivor set");
  long long nh = static_cast<long long>(std::ceil(1.0 / d - 1e-12));
  if (nh < 1) nh = 1;
  while (1.0 / static_cast<double>(nh) > d) ++nh;
  while (nh > 1 && 1.0 / static_cast<double>(nh - 1) <= d) --nh;
  return static_cast<int>(nh);
}

}  // namespace

DegenerateProbe degenerate_probe(const OpenSystem& sys,
                                 const SpectralSolution& sol,
                                 const BinPartition& partition, double z,
                                 const std::vector<int>& n_values) {
  const TargetSpec t = classify_target(sys, z);
  if (t.cls != TargetClass::off_survivor)
    fail("classification_mismatch", kModule,
         "degenerate probe requires an off-survivor target, got " +
             target_class_name(t.cls));
  if (n_values.empty()) fail("domain_error", kModule, "empty n grid");
  for (int n : n_values)
    if (n < 1) fail("domain_error", kModule, "probe needs n >= 1");

  DegenerateProbe probe;
  probe.n_hat = first_disjoint_n(sys, z, nullptr);
  probe.n_values = n_values;
  for (int n : n_values)
    probe.u_n.push_back(std::log(static_cast<double>(n)));
  probe.curve =
      evd_operator_curve(sys, sol, partition, z, n_values, probe.u_n);
  return probe;
}

DistanceEstimate distance_estimate(const OpenSystem& sys,
                                   const SpectralSolution& sol, double z) {
  (void)sol;
  const TargetSpec t = classify_target(sys, z);
  if (t.cls != TargetClass::off_survivor)
    fail("classification_mismatch", kModule,
         "distance estimate requires an off-survivor target, got " +
             target_class_name(t.cls));
  DistanceEstimate est;
  est.n_hat = first_disjoint_n(sys, z, &est.exact_distance);
  est.estimate = 1.0 / static_cast<double>(est.n_hat);
  return est;
}

//----------------------------------------------------------------------
// Trichotomy dispatcher.
//----------------------------------------------------------------------

EvdRun build_evd_run(const OpenSystem& sys, const SpectralSolution& sol,
                     const BinPartition& partition, double z, double tau,
                     const std::vector<int>& n_values, int n_particles,
                     std::uint64_t seed, int workers) {
  EvdRun run;
  run.tau = tau;
  run.n_values = n_values;
  run.target = classify_target(sys, z);

  if (run.target.cls == TargetClass::off_survivor) {
    run.degenerate = true;
    const DegenerateProbe probe =
        degenerate_probe(sys, sol, partition, z, n_values);
    run.n_hat = probe.n_hat;
    run.levels.z = z;
    run.levels.tau = std::numeric_limits<double>::quiet_NaN();
    run.levels.n_values = n_values;
    run.levels.u_n = probe.u_n;
    for (double u : probe.u_n) run.levels.radii.push_back(std::exp(-u));
    run.op_curve = probe.curve;
    return run;
  }

  run.levels = boundary_levels(sol, z, tau, n_values);
  run.mc = empirical_evd(sys, sol, z, run.levels, n_particles, seed, workers);
  run.op_curve =
      evd_operator_curve(sys, sol, partition, z, n_values, run.levels.u_n);
  if (run.target.cls == TargetClass::periodic) {
    const double dp = orbit_derivative(sys.map, z, run.target.period);
    run.theta_formula_value = theta_formula(run.target, sol.alpha, dp);
  } else {
    run.theta_formula_value = 1.0;
  }
  return run;
}

}  // namespace openevt
