#ifndef OPENEVT_EXTREMES_HPP
#define OPENEVT_EXTREMES_HPP

#include <cstdint>
#include <limits>
#include <vector>

#include "openevt/interval_maps.hpp"
#include "openevt/ulam.hpp"

namespace openevt {

// phi(x) = -log|x - z|; +infinity at x == z, so the running maximum
// exceeds every finite level once the orbit hits the target exactly.
double observable_phi(double x, double z);

//----------------------------------------------------------------------
// Boundary levels u_n with n * Lambda(B(z, e^{-u_n})) = tau.
//----------------------------------------------------------------------

struct BoundaryLevels {
  double z = 0.0;
  double tau = 0.0;
  std::vector<int> n_values;
  std::vector<double> u_n;
  std::vector<double> radii;  // e^{-u_n}
};

BoundaryLevels boundary_levels(const SpectralSolution& sol, double z,
                               double tau, const std::vector<int>& n_values);

//----------------------------------------------------------------------
// Conditioned Monte Carlo curve P_n(M_n <= u_n).
//----------------------------------------------------------------------

struct McCurvePoint {
  int n = 0;
  double u_n = 0.0;
  double radius = 0.0;
  long long survivors = 0;  // particles alive through n-1 steps
  double p_mc = 0.0;        // fraction of survivors with M_n <= u_n
  double stderr_p = 0.0;    // binomial
};

struct McCurve {
  std::vector<McCurvePoint> points;
};

McCurve empirical_evd(const OpenSystem& sys, const SpectralSolution& sol,
                      double z, const BoundaryLevels& levels, int n_particles,
                      std::uint64_t seed, int workers = 1);

//----------------------------------------------------------------------
// Conditional return ratios and the derived extremal index.
//----------------------------------------------------------------------

struct ReturnRatios {
  int k_max = 0;
  std::vector<double> radii;              // sorted descending
  std::vector<std::vector<double>> r_kn;  // [k][radius]
  std::vector<std::vector<double>> q_kn;  // operator route, same shape
  std::vector<double> r_k;                // column at the smallest radius
  double theta_ret = 1.0;                 // 1 - sum_k r_k
};

// r_{k,n} = Lambda(B ∩ T^{-1}B^c ∩ ... ∩ T^{-k}B^c ∩ T^{-(k+1)}B) /
// Lambda(B) with the ball snapped to whole partition bins, measures by
// exact interval algebra; q_{k,n} independently from operator products.
ReturnRatios return_ratios(const OpenSystem& sys, const SpectralSolution& sol,
                           const BinPartition& partition, double z, int p_hint,
                           int k_max, const std::vector<double>& radii);

//----------------------------------------------------------------------
// Extremal-index estimators.
//----------------------------------------------------------------------

// Closed form: periodic(p) -> 1 - 1/(alpha^p |(T^p)'(z)|);
// nonperiodic -> 1; off_survivor -> formula_domain (degenerate law).
double theta_formula(const TargetSpec& target, double alpha, double deriv_p);

struct SpectralTheta {
  PerturbedSpectrum spectrum;
  std::vector<int> used;  // radius indices passing the resolution guard
  double estimate = 0.0;  // linear-in-Delta extrapolation to Delta = 0
};

SpectralTheta theta_spectral(const OpenSystem& sys,
                             const SpectralSolution& sol,
                             const BinPartition& partition, double z,
                             const std::vector<double>& radii);

struct GumbelFit {
  int n = 0;
  long long survivors = 0;
  std::vector<double> taus, u_n, radii, p_mc, stderr_p;
  double theta = 0.0;
  double se_theta = 0.0;
  double intercept = 0.0;
  double se_intercept = 0.0;
};

// Fits -log P_n(M_n <= u_n(tau)) against tau at fixed n by weighted
// least squares (binomial weights); one conditioned ensemble is reused
// across the tau grid by level thresholding.
GumbelFit theta_gumbel(const OpenSystem& sys, const SpectralSolution& sol,
                       double z, int n, const std::vector<double>& taus,
                       int n_particles, std::uint64_t seed, int workers = 1);

//----------------------------------------------------------------------
// Degenerate pipeline for off-survivor targets (u_n = log n).
//----------------------------------------------------------------------

struct DegenerateProbe {
  int n_hat = 0;  // first n with B(z, 1/n) disjoint from the survivor set
  std::vector<int> n_values;
  std::vector<double> u_n;    // log n
  std::vector<double> curve;  // operator curve, tends to 1
};

DegenerateProbe degenerate_probe(const OpenSystem& sys,
                                 const SpectralSolution& sol,
                                 const BinPartition& partition, double z,
                                 const std::vector<int>& n_values);

struct DistanceEstimate {
  double estimate = 0.0;        // 1 / n_hat
  double exact_distance = 0.0;  // dist(z, survivor_approx(20))
  int n_hat = 0;
};

DistanceEstimate distance_estimate(const OpenSystem& sys,
                                   const SpectralSolution& sol, double z);

//----------------------------------------------------------------------
// One full extreme-value run for a target (trichotomy dispatcher).
//----------------------------------------------------------------------

struct EvdRun {
  TargetSpec target;
  double tau = 1.0;
  std::vector<int> n_values;
  bool degenerate = false;
  int n_hat = 0;
  BoundaryLevels levels;  // u_n = log n when degenerate
  McCurve mc;             // empty when degenerate
  std::vector<double> op_curve;
  double theta_formula_value = std::numeric_limits<double>::quiet_NaN();
};

EvdRun build_evd_run(const OpenSystem& sys, const SpectralSolution& sol,
                     const BinPartition& partition, double z, double tau,
                     const std::vector<int>& n_values, int n_particles,
                     std::uint64_t seed, int workers = 1);

}  // namespace openevt

#endif
