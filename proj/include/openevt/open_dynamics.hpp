#ifndef OPENEVT_OPEN_DYNAMICS_HPP
#define OPENEVT_OPEN_DYNAMICS_HPP

#include <cstdint>
#include <vector>

#include "openevt/interval_maps.hpp"
#include "openevt/ulam.hpp"

namespace openevt {

//----------------------------------------------------------------------
// Deterministic per-particle RNG. Each particle owns a splitmix64
// stream derived from (seed, particle index), so results do not depend
// on worker count or iteration order.
//----------------------------------------------------------------------

struct SplitMix64 {
  std::uint64_t state;

  explicit SplitMix64(std::uint64_t s) : state(s) {}
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  // Uniform in [0,1).
  double uniform() { return (next() >> 11) * 0x1.0p-53; }
};

SplitMix64 particle_stream(std::uint64_t seed, std::uint64_t index);

//----------------------------------------------------------------------
// Sampling from a piecewise-constant density.
//----------------------------------------------------------------------

class DensitySampler {
 public:
  // weights are per-bin density values; throws empty_density if the
  // total mass vanishes.
  DensitySampler(const std::vector<double>& weights,
                 const BinPartition& partition);
  double sample(SplitMix64& rng) const;

 private:
  BinPartition partition_;
  std::vector<double> cdf_;  // cumulative bin masses, last entry 1
};

double sample_from_density(const std::vector<double>& weights,
                           const BinPartition& partition, SplitMix64& rng);

// Per-bin density of nu = 1_{X0} h0 m (zero on hole bins; edge bins
// carry the overlap fraction).
std::vector<double> nu_weights(const OpenSystem& sys,
                               const SpectralSolution& sol);

//----------------------------------------------------------------------
// Survival simulation.
//----------------------------------------------------------------------

struct SurvivalResult {
  std::vector<double> prefix;  // positions up to and including the exit
  int exit_time = -1;          // -1 = survived the horizon
  bool survived() const { return exit_time < 0; }
};

SurvivalResult survival_simulate(const OpenSystem& sys, double x0,
                                 int horizon);

struct SurvivalEnsemble {
  std::uint64_t seed = 0;
  int n_particles = 0;
  int horizon = 0;
  std::vector<long long> survivor_counts;  // counts[t], t = 0..horizon
  std::vector<int> exit_times;             // per particle, -1 = survived
};

// Samples n_particles initial conditions from nu and simulates to the
// horizon. Identical output for any worker count.
SurvivalEnsemble build_survival_ensemble(const OpenSystem& sys,
                                         const SpectralSolution& sol,
                                         int n_particles, int horizon,
                                         std::uint64_t seed, int workers = 1);

struct AlphaEstimate {
  double alpha_hat = 0.0;
  double stderr_alpha = 0.0;
  int points_used = 0;
};

// Unweighted least squares on log survivor fraction over the window
// with at least 100 survivors; throws insufficient_survivors when
// fewer than 3 usable points remain.
AlphaEstimate estimate_alpha_mc(const OpenSystem& sys,
                                const SpectralSolution& sol,
                                int n_particles, int horizon,
                                std::uint64_t seed, int workers = 1);

struct GofResult {
  double statistic = 0.0;
  double threshold_99 = 0.0;
  int dof = 0;
  bool pass = false;
};

// Chi-squared goodness of fit of the exit-time histogram against the
// geometric law P(exit at t) = alpha^{t-1}(1 - alpha).
GofResult chi2_survival_gof(const SurvivalEnsemble& ens, double alpha);

// Max relative residual of nu(T^{-n}A ∩ X_n) = nu(A) nu(X_n) over the
// test sets, all measures by exact interval algebra; n <= 20.
double check_conditional_invariance(const OpenSystem& sys,
                                    const SpectralSolution& sol,
                                    const std::vector<IntervalSet>& test_sets,
                                    int n);

// eta = -log(alpha); throws domain_error for alpha <= 0.
double escape_rate(double alpha);

// Rejection conditioning needs n_particles * alpha^{horizon-1} >= 100
// expected survivors; throws infeasible_horizon otherwise.
void check_horizon_feasible(double alpha, long long n_particles,
                            int horizon);

}  // namespace openevt

#endif
