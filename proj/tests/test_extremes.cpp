#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "openevt/errors.hpp"
#include "openevt/extremes.hpp"
#include "openevt/interval_maps.hpp"
#include "openevt/ulam.hpp"

using namespace openevt;

namespace {

const double kPhi = (1.0 + std::sqrt(5.0)) / 2.0;
const double kAlphaGolden = (1.0 + std::sqrt(5.0)) / 4.0;
const double kT0 = std::log(kPhi) / std::log(2.0);
// Nonperiodic survivor point of the golden system: binary expansion
// avoids 00 and repeats no block up to lag 16 within 1e-9.
const double kZStar = 0x1.7fffdb5b5b5b4p-1;

OpenSystem golden_system() {
  return make_open_system(make_doubling(),
                          IntervalSet(Interval{0.0, 0.25}));
}

}  // namespace

//----------------------------------------------------------------------

TEST_CASE("observable is the log distance to the target") {
  const double z = 0.5;
  CHECK(std::abs(observable_phi(z + std::exp(-5.0), z) - 5.0) <= 1e-12);
  CHECK(std::abs(observable_phi(z - std::exp(-5.0), z) - 5.0) <= 1e-12);
  CHECK(std::abs(observable_phi(1.5, z) - 0.0) <= 1e-12);
  CHECK(observable_phi(z, z) == std::numeric_limits<double>::infinity());
  CHECK(observable_phi(0.9, z) == observable_phi(0.1, z));
}

TEST_CASE("boundary levels reproduce the closed form for Lebesgue") {
  // No hole: Lambda is Lebesgue, so Lambda(B(1/2, r)) = 2r and the
  // level solving n * 2r = tau is r = tau / (2n).
  const OpenSystem sys = make_open_system(make_doubling(), IntervalSet());
  const BinPartition part = build_partition(sys, 64, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  const BoundaryLevels lv = boundary_levels(sol, 0.5, 1.0, {1, 2, 4, 8});
  for (std::size_t i = 0; i < lv.n_values.size(); ++i) {
    const double n = static_cast<double>(lv.n_values[i]);
    CHECK(std::abs(lv.radii[i] - 0.5 / n) <= 1e-8);
    CHECK(std::abs(lv.u_n[i] - std::log(2.0 * n)) <= 1e-7);
  }
}

TEST_CASE("boundary levels follow the local dimension ladder") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);
  const double z = 1.0 / 3.0;

  const std::vector<int> ns = {4, 8, 16, 32, 64, 128, 256};
  const BoundaryLevels lv = boundary_levels(sol, z, 1.0, ns);

  for (std::size_t i = 0; i < ns.size(); ++i) {
    // Defining property: n * Lambda(B(z, r_n)) = tau.
    const double mass = lambda_measure_interp(
        sol, IntervalSet(Interval{z - lv.radii[i], z + lv.radii[i]}));
    CHECK(std::abs(static_cast<double>(ns[i]) * mass - 1.0) <= 1e-6);
    // u_n tracks (log n) / t0 up to a bounded lattice oscillation.
    const double dev = lv.u_n[i] - std::log(static_cast<double>(ns[i])) / kT0;
    CHECK(dev <= 0.05);
    CHECK(dev >= -1.0);
    if (i > 0) CHECK(lv.u_n[i] > lv.u_n[i - 1]);
  }
  // Doubling n advances u_n by log2 / t0 on average.
  const double mean_step = (lv.u_n.back() - lv.u_n.front()) /
                           static_cast<double>(ns.size() - 1);
  CHECK(std::abs(mean_step - std::log(2.0) / kT0) <= 0.05);
}

TEST_CASE("boundary levels refuse unreachable mass") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 10, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  // z inside the hole: Lambda vanishes near z.
  CHECK_THROWS_WITH_AS(boundary_levels(sol, 0.1, 1.0, {4}),
                       doctest::Contains("no mass"), NamedError);
  try {
    boundary_levels(sol, 0.1, 1.0, {4});
  } catch (const NamedError& e) {
    CHECK(e.name() == "off_support");
    CHECK(e.module_name() == "extremes");
  }
  // tau / n beyond the total mass of Lambda.
  CHECK_THROWS_AS(boundary_levels(sol, 1.0 / 3.0, 3.0, {1}), NamedError);
  // Bad grids.
  CHECK_THROWS_AS(boundary_levels(sol, 1.0 / 3.0, -1.0, {4}), NamedError);
  CHECK_THROWS_AS(boundary_levels(sol, 1.0 / 3.0, 1.0, {}), NamedError);
  CHECK_THROWS_AS(boundary_levels(sol, 1.0 / 3.0, 1.0, {0}), NamedError);
}

TEST_CASE("conditioned hitting statistics match the operator curve") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);
  const double z = 1.0 / 3.0;

  const std::vector<int> ns = {4, 8, 16, 32};
  const BoundaryLevels lv = boundary_levels(sol, z, 1.0, ns);
  const McCurve mc = empirical_evd(sys, sol, z, lv, 200000, 424242, 4);
  const std::vector<double> oc =
      evd_operator_curve(sys, sol, part, z, ns, lv.u_n);

  long long prev_surv = 200001;
  for (std::size_t i = 0; i < ns.size(); ++i) {
    const McCurvePoint& pt = mc.points[i];
    CHECK(pt.n == ns[i]);
    CHECK(pt.survivors > 0);
    CHECK(pt.survivors < prev_surv);
    prev_surv = pt.survivors;
    CHECK(pt.p_mc >= 0.0);
    CHECK(pt.p_mc <= 1.0);
    CHECK(pt.stderr_p > 0.0);
    CHECK(std::abs(pt.p_mc - oc[i]) <= 3.0 * pt.stderr_p + 1e-3);
  }
}

TEST_CASE("levels below the observable range give zero mass") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 4, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  // u <= 0 means the ball covers [0,1]; every orbit sits inside it.
  BoundaryLevels lv;
  lv.z = 1.0 / 3.0;
  lv.tau = 1.0;
  lv.n_values = {4};
  lv.u_n = {-0.1};
  lv.radii = {std::exp(0.1)};
  const McCurve mc = empirical_evd(sys, sol, lv.z, lv, 5000, 7, 2);
  CHECK(mc.points[0].p_mc == 0.0);
  CHECK(mc.points[0].stderr_p == 0.0);
}

TEST_CASE("hitting curves are identical for any worker split") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);
  const double z = 1.0 / 3.0;

  const BoundaryLevels lv = boundary_levels(sol, z, 1.0, {4, 8, 16, 32});
  const McCurve a = empirical_evd(sys, sol, z, lv, 100000, 99, 1);
  const McCurve b = empirical_evd(sys, sol, z, lv, 100000, 99, 7);
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    CHECK(a.points[i].survivors == b.points[i].survivors);
    CHECK(a.points[i].p_mc == b.points[i].p_mc);
  }
  const McCurve c = empirical_evd(sys, sol, z, lv, 100000, 100, 7);
  CHECK(c.points[0].p_mc != a.points[0].p_mc);
}

//----------------------------------------------------------------------

TEST_CASE("periodic returns concentrate at the orbit period") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);
  const double z = 1.0 / 3.0;  // period 2 under doubling

  const std::vector<double> radii = {std::ldexp(1.0, -10),
                                     std::ldexp(1.0, -11),
                                     std::ldexp(1.0, -12)};
  const ReturnRatios rr = return_ratios(sys, sol, part, z, 2, 8, radii);
  CHECK(rr.k_max == 8);
  CHECK(rr.radii.size() == 3);

  // The first return happens after exactly p = 2 steps (k = 1): the
  // conditional ratio is 1 / (alpha^2 |(T^2)'|) = 2 - phi, every other
  // k carries nothing.
  for (int k = 0; k <= rr.k_max; ++k) {
    for (std::size_t j = 0; j < rr.radii.size(); ++j) {
      const double r_ob = rr.r_kn[static_cast<std::size_t>(k)][j];
      CHECK(r_ob >= 0.0);
      if (k == 1) {
        CHECK(std::abs(r_ob - (2.0 - kPhi)) <= 1e-8);
      } else {
        CHECK(r_ob <= 1e-12);
      }
      // Independent operator route agrees: q = alpha^{k+1} r.
      const double pred = std::pow(sol.alpha, k + 1) * r_ob;
      CHECK(std::abs(rr.q_kn[static_cast<std::size_t>(k)][j] - pred) <= 1e-9);
    }
  }
  double sum = 0.0;
  for (double v : rr.r_k) sum += v;
  CHECK(sum <= 1.0 + 1e-12);
  CHECK(std::abs(rr.theta_ret - (kPhi - 1.0)) <= 1e-8);
}

TEST_CASE("nonperiodic returns vanish at small radius") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  const std::vector<double> radii = {std::ldexp(1.0, -12),
                                     std::ldexp(1.0, -13)};
  const ReturnRatios rr = return_ratios(sys, sol, part, kZStar, 0, 8, radii);
  for (const auto& row : rr.r_kn)
    for (double v : row) CHECK(v <= 1e-12);
  CHECK(std::abs(rr.theta_ret - 1.0) <= 1e-12);
}

TEST_CASE("coarse radii fail the return stability gate") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  // At radius 2^-6 the ball re-covers itself within 8 steps purely by
  // expansion, so the deep-k ratios have not converged yet; the gate
  // must refuse rather than extrapolate.
  try {
    return_ratios(sys, sol, part, 1.0 / 3.0, 2, 8,
                  {std::ldexp(1.0, -6), std::ldexp(1.0, -7)});
    CHECK(false);
  } catch (const NamedError& e) {
    CHECK(e.name() == "discretization_tolerance");
    CHECK(std::string(e.what()).find("unstable") != std::string::npos);
  }
}

TEST_CASE("balls crossing a branch boundary are refused") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 10, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  try {
    return_ratios(sys, sol, part, 0.49, 0, 2, {0.05});
    CHECK(false);
  } catch (const NamedError& e) {
    CHECK(e.name() == "ball_too_large");
    CHECK(e.module_name() == "extremes");
  }
  // The same center works once the radius clears the boundary at 0.5.
  const ReturnRatios rr = return_ratios(sys, sol, part, 0.49, 0, 2, {0.005});
  CHECK(rr.r_kn.size() == 3);
}

//----------------------------------------------------------------------

TEST_CASE("closed-form extremal index") {
  TargetSpec periodic;
  periodic.z = 1.0 / 3.0;
  periodic.cls = TargetClass::periodic;
  periodic.period = 2;

  // Golden system: alpha^2 * 4 = phi^2, so theta = 1 - 1/phi^2 = phi-1.
  const double th = theta_formula(periodic, kAlphaGolden, 4.0);
  CHECK(std::abs(th - (kPhi - 1.0)) <= 1e-12);

  // Closed system (alpha = 1), period 2, derivative 4.
  CHECK(std::abs(theta_formula(periodic, 1.0, 4.0) - 0.75) <= 1e-15);

  TargetSpec nonper;
  nonper.cls = TargetClass::nonperiodic;
  CHECK(theta_formula(nonper, kAlphaGolden, 0.0) == 1.0);

  TargetSpec off;
  off.cls = TargetClass::off_survivor;
  try {
    theta_formula(off, kAlphaGolden, 4.0);
    CHECK(false);
  } catch (const NamedError& e) {
    CHECK(e.name() == "formula_domain");
  }

  // alpha^p |T^p'| <= 1 leaves the formula's domain.
  TargetSpec fixed;
  fixed.cls = TargetClass::periodic;
  fixed.period = 1;
  CHECK_THROWS_AS(theta_formula(fixed, 0.5, 2.0), NamedError);
}

TEST_CASE("spectral slopes extrapolate to the extremal index") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  const std::vector<double> radii = {
      std::ldexp(1.0, -5), std::ldexp(1.0, -6), std::ldexp(1.0, -7),
      std::ldexp(1.0, -8), std::ldexp(1.0, -9)};
  const SpectralTheta st = theta_spectral(sys, sol, part, 1.0 / 3.0, radii);
  CHECK(st.used.size() == 5);
  // Slopes decrease toward theta as the ball shrinks.
  for (std::size_t i = 1; i < st.spectrum.slope_estimates.size(); ++i)
    CHECK(st.spectrum.slope_estimates[i] <
          st.spectrum.slope_estimates[i - 1] + 0.02);
  CHECK(std::abs(st.estimate - (kPhi - 1.0)) <= 0.05);

  // A single ball below the bin resolution cannot support the guard.
  CHECK_THROWS_AS(
      theta_spectral(sys, sol, part, 1.0 / 3.0, {std::ldexp(1.0, -12)}),
      NamedError);
}

TEST_CASE("gumbel fit recovers the tau slope at finite n") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);
  const double z = 1.0 / 3.0;

  const std::vector<double> taus = {0.5, 1.0, 2.0};
  const GumbelFit fit = theta_gumbel(sys, sol, z, 32, taus, 1000000, 777, 8);
  CHECK(fit.survivors > 1000);
  CHECK(fit.u_n.size() == 3);
  for (std::size_t j = 0; j < taus.size(); ++j) {
    CHECK(fit.p_mc[j] > 0.0);
    CHECK(fit.p_mc[j] < 1.0);
    if (j > 0) CHECK(fit.p_mc[j] < fit.p_mc[j - 1]);  // higher tau, lower level
  }
  CHECK(fit.se_theta > 0.0);
  CHECK(fit.se_theta < 0.08);
  // The intercept of -log P against tau is zero within noise.
  CHECK(std::abs(fit.intercept) <= 3.0 * fit.se_intercept);
  // At n = 32 the conditioned law has not reached its n -> infinity
  // limit: the fitted slope sits measurably above theta = phi - 1.
  CHECK(fit.theta > 0.70);
  CHECK(fit.theta < 0.82);
  CHECK((fit.theta - (kPhi - 1.0)) / fit.se_theta > 3.0);

  // Same ensemble, same counts, regardless of worker count.
  const GumbelFit again = theta_gumbel(sys, sol, z, 32, taus, 1000000, 777, 3);
  CHECK(again.theta == fit.theta);
  CHECK(again.survivors == fit.survivors);

  CHECK_THROWS_AS(theta_gumbel(sys, sol, z, 32, {1.0}, 1000000, 777, 2),
                  NamedError);
}

//----------------------------------------------------------------------

TEST_CASE("degenerate probe finds the separation scale") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 10, true);
  const SpectralSolution sol = spectral_solution(sys, part);

  // z = 0.1 sits inside the hole; the nearest survivor point is 1/3,
  // so dist = 7/30 and the first ball radius 1/n below it is 1/5.
  const DistanceEstimate de = distance_estimate(sys, sol, 0.1);
  CHECK(std::abs(de.exact_distance - 7.0 / 30.0) <= 1e-5);
  CHECK(de.n_hat == 5);
  CHECK(std::abs(de.estimate - 0.2) <= 1e-15);
  CHECK(de.estimate / de.exact_distance >= 0.25);
  CHECK(de.estimate / de.exact_distance <= 4.0);

  const std::vector<int> ns = {1, 2, 5, 10, 50, 60};
  const DegenerateProbe probe = degenerate_probe(sys, sol, part, 0.1, ns);
  CHECK(probe.n_hat == 5);
  for (std::size_t i = 0; i < ns.size(); ++i) {
    CHECK(std::abs(probe.u_n[i] -
                   std::log(static_cast<double>(ns[i]))) <= 1e-15);
    CHECK(probe.curve[i] >= 0.0);
    CHECK(probe.curve[i] <= 1.0 + 1e-12);
    // Once the ball B(z, 1/n) sinks inside the hole, the conditioned
    // law is exactly degenerate at 1.
    if (ns[i] >= 10 * probe.n_hat) CHECK(probe.curve[i] >= 0.99);
  }
  CHECK(std::abs(probe.curve.back() - 1.0) <= 1e-9);

  // Survivor targets are not degenerate.
  try {
    degenerate_probe(sys, sol, part, 1.0 / 3.0, ns);
    CHECK(false);
  } catch (const NamedError& e) {
    CHECK(e.name() == "classification_mismatch");
  }
  CHECK_THROWS_AS(distance_estimate(sys, sol, kZStar), NamedError);
}

TEST_CASE("evd runs dispatch on the target trichotomy") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 12, true);
  const SpectralSolution sol = spectral_solution(sys, part);
  const std::vector<int> ns = {4, 8, 16};

  // Periodic survivor target.
  const EvdRun per =
      build_evd_run(sys, sol, part, 1.0 / 3.0, 1.0, ns, 100000, 11, 4);
  CHECK(per.target.cls == TargetClass::periodic);
  CHECK(per.target.period == 2);
  CHECK_FALSE(per.degenerate);
  CHECK(per.mc.points.size() == ns.size());
  CHECK(per.op_curve.size() == ns.size());
  CHECK(std::abs(per.theta_formula_value - (kPhi - 1.0)) <= 1e-12);
  for (std::size_t i = 0; i < ns.size(); ++i)
    CHECK(std::abs(per.mc.points[i].p_mc - per.op_curve[i]) <=
          3.0 * per.mc.points[i].stderr_p + 1e-3);

  // Nonperiodic survivor target.
  const EvdRun non =
      build_evd_run(sys, sol, part, kZStar, 1.0, ns, 100000, 12, 4);
  CHECK(non.target.cls == TargetClass::nonperiodic);
  CHECK(non.theta_formula_value == 1.0);
  CHECK_FALSE(non.degenerate);

  // Off-survivor target: degenerate pipeline with u_n = log n.
  const EvdRun deg =
      build_evd_run(sys, sol, part, 0.1, 1.0, {2, 5, 50}, 1000, 13, 1);
  CHECK(deg.degenerate);
  CHECK(deg.n_hat == 5);
  CHECK(deg.mc.points.empty());
  CHECK(deg.op_curve.size() == 3);
  CHECK(deg.op_curve.back() >= 0.99);
  CHECK(std::isnan(deg.theta_formula_value));
  CHECK(std::abs(deg.levels.radii[1] - 0.2) <= 1e-15);
}

TEST_CASE("infeasible horizons are refused up front") {
  const OpenSystem sys = golden_system();
  const BinPartition part = build_partition(sys, 1 << 10, true);
  const SpectralSolution sol = spectral_solution(sys, part);
  const BoundaryLevels lv = boundary_levels(sol, 1.0 / 3.0, 1.0, {40});

  try {
    empirical_evd(sys, sol, 1.0 / 3.0, lv, 1000, 5, 1);
    CHECK(false);
  } catch (const NamedError& e) {
    CHECK(e.name() == "infeasible_horizon");
  }
  CHECK_THROWS_AS(theta_gumbel(sys, sol, 1.0 / 3.0, 40, {0.5, 1.0}, 1000, 5, 1),
                  NamedError);
}
