#include "openevt/open_dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "openevt/errors.hpp"

namespace openevt {

//----------------------------------------------------------------------
// Per-particle streams.
//----------------------------------------------------------------------

namespace {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdULL;
  z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ULL;
  return z ^ (z >> 33);
}

}  // namespace

SplitMix64 particle_stream(std::uint64_t seed, std::uint64_t index) {
  // The index constant differs from the splitmix increment so that
  // neighbouring particles are not shifted copies of one stream.
  return SplitMix64(mix64(seed + 0xd1342543de82ef95ULL * (index + 1)));
}

//----------------------------------------------------------------------
// Density sampling.
//----------------------------------------------------------------------

DensitySampler::DensitySampler(const std::vector<double>& weights,
                               const BinPartition& partition)
    : partition_(partition) {
  const std::size_t k = partition_.bins();
  if (weights.size() != k)
    fail("empty_density", "open_dynamics",
         "weights/partition size mismatch: " + std::to_string(weights.size()) +
             " vs " + std::to_string(k));
  cdf_.resize(k);
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += std::max(weights[i], 0.0) * partition_.width(i);
    cdf_[i] = acc;
  }
  if (!(acc > 0.0))
    fail("empty_density", "open_dynamics", "density has no mass");
  for (double& c : cdf_) c /= acc;
  cdf_.back() = 1.0;
}

double DensitySampler::sample(SplitMix64& rng) const {
  const double u1 = rng.uniform();
  const std::size_t i =
      std::upper_bound(cdf_.begin(), cdf_.end(), u1) - cdf_.begin();
  const std::size_t bin = std::min(i, cdf_.size() - 1);
  const double lo = partition_.breakpoints[bin];
  const double hi = partition_.breakpoints[bin + 1];
  const double u2 = rng.uniform();
  return lo + u2 * (hi - lo);
}

double sample_from_density(const std::vector<double>& weights,
                           const BinPartition& partition, SplitMix64& rng) {
  return DensitySampler(weights, partition).sample(rng);
}

std::vector<double> nu_weights(const OpenSystem& sys,
                               const SpectralSolution& sol) {
  const std::size_t k = sol.partition.bins();
  std::vector<double> w(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const IntervalSet piece = IntervalSet(Interval{sol.partition.breakpoints[i],
                                                   sol.partition.breakpoints[i + 1]})
                                  .intersect(sys.x0);
    w[i] = sol.h0[i] * piece.measure() / sol.partition.width(i);
  }
  return w;
}

//----------------------------------------------------------------------
// Simulation.
//----------------------------------------------------------------------

namespace {

// First t in 1..horizon with T^t(x0) outside X0; -1 if none.
inline int exit_time_of(const OpenSystem& sys, double x0, int horizon) {
  double x = x0;
  for (int t = 1; t <= horizon; ++t) {
    x = evaluate(sys.map, x);
    if (x >= 1.0) x = std::nextafter(1.0, 0.0);
    if (!sys.x0.contains(x)) return t;
  }
  return -1;
}

inline double sample_initial(const DensitySampler& sampler,
                             const OpenSystem& sys, SplitMix64& rng) {
  for (int tries = 0; tries < 1000; ++tries) {
    const double x = sampler.sample(rng);
    if (sys.x0.contains(x)) return x;
  }
  fail("empty_density", "open_dynamics",
       "rejection sampling failed: density concentrated on the hole");
}

}  // namespace

SurvivalResult survival_simulate(const OpenSystem& sys, double x0,
                                 int horizon) {
  SurvivalResult res;
  res.prefix.reserve(static_cast<std::size_t>(horizon) + 1);
  res.prefix.push_back(x0);
  double x = x0;
  for (int t = 1; t <= horizon; ++t) {
    x = evaluate(sys.map, x);
    if (x >= 1.0) x = std::nextafter(1.0, 0.0);
    res.prefix.push_back(x);
    if (!sys.x0.contains(x)) {
      res.exit_time = t;
      return res;
    }
  }
  res.exit_time = -1;
  return res;
}

SurvivalEnsemble build_survival_ensemble(const OpenSystem& sys,
                                         const SpectralSolution& sol,
                                         int n_particles, int horizon,
                                         std::uint64_t seed, int workers) {
  if (n_particles <= 0 || horizon <= 0)
    fail("insufficient_survivors", "open_dynamics",
         "need positive particle count and horizon");
  const DensitySampler sampler(nu_weights(sys, sol), sol.partition);

  SurvivalEnsemble ens;
  ens.seed = seed;
  ens.n_particles = n_particles;
  ens.horizon = horizon;
  ens.exit_times.assign(static_cast<std::size_t>(n_particles), -1);

  // exit_times[i] depends only on (seed, i), so any contiguous split
  // over workers yields the same ensemble.
  const int nw = std::max(1, workers);
  auto run_range = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      SplitMix64 rng = particle_stream(seed, static_cast<std::uint64_t>(i));
      const double x0 = sample_initial(sampler, sys, rng);
      ens.exit_times[static_cast<std::size_t>(i)] =
          exit_time_of(sys, x0, horizon);
    }
  };
  if (nw == 1) {
    run_range(0, n_particles);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n_particles + nw - 1) / nw;
    for (int w = 0; w < nw; ++w) {
      const int lo = w * chunk;
      const int hi = std::min(n_particles, lo + chunk);
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  ens.survivor_counts.assign(static_cast<std::size_t>(horizon) + 1, 0);
  std::vector<long long> exits_at(static_cast<std::size_t>(horizon) + 1, 0);
  for (int e : ens.exit_times)
    if (e > 0) ++exits_at[static_cast<std::size_t>(e)];
  long long alive = n_particles;
  ens.survivor_counts[0] = alive;
  for (int t = 1; t <= horizon; ++t) {
    alive -= exits_at[static_cast<std::size_t>(t)];
    ens.survivor_counts[static_cast<std::size_t>(t)] = alive;
  }
  return ens;
}

//----------------------------------------------------------------------
// Escape-rate estimation.
//----------------------------------------------------------------------

AlphaEstimate estimate_alpha_mc(const OpenSystem& sys,
                                const SpectralSolution& sol, int n_particles,
                                int horizon, std::uint64_t seed, int workers) {
  const SurvivalEnsemble ens =
      build_survival_ensemble(sys, sol, n_particles, horizon, seed, workers);

  std::vector<double> ts, ys;
  for (int t = 0; t <= horizon; ++t) {
    const long long c = ens.survivor_counts[static_cast<std::size_t>(t)];
    if (c < 100) break;
    ts.push_back(static_cast<double>(t));
    ys.push_back(std::log(static_cast<double>(c) /
                          static_cast<double>(n_particles)));
  }
  const std::size_t m = ts.size();
  if (m < 3)
    fail("insufficient_survivors", "open_dynamics",
         "only " + std::to_string(m) +
             " time points with >= 100 survivors; need at least 3");

  double tbar = 0.0, ybar = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    tbar += ts[i];
    ybar += ys[i];
  }
  tbar /= static_cast<double>(m);
  ybar /= static_cast<double>(m);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    sxx += (ts[i] - tbar) * (ts[i] - tbar);
    sxy += (ts[i] - tbar) * (ys[i] - ybar);
  }
  const double slope = sxy / sxx;

  AlphaEstimate est;
  est.alpha_hat = std::exp(slope);

  // Survivor counts are nested, so residual-based errors would be far
  // too optimistic. The martingale decomposition of log counts gives
  // Cov(y_s, y_t) = (alpha^{-min(s,t)} - 1) / N; propagate it through
  // the least-squares weights.
  std::vector<double> cw(m);
  for (std::size_t i = 0; i < m; ++i) cw[i] = (ts[i] - tbar) / sxx;
  double var_slope = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double tmin = std::min(ts[i], ts[j]);
      var_slope += cw[i] * cw[j] *
                   (std::pow(est.alpha_hat, -tmin) - 1.0) /
                   static_cast<double>(n_particles);
    }
  est.stderr_alpha = est.alpha_hat * std::sqrt(std::max(var_slope, 0.0));
  est.points_used = static_cast<int>(m);
  return est;
}

GofResult chi2_survival_gof(const SurvivalEnsemble& ens, double alpha) {
  if (!(alpha > 0.0) || !(alpha < 1.0))
    fail("domain_error", "open_dynamics",
         "chi-squared reference law needs alpha in (0,1), got " +
             std::to_string(alpha));
  const double n = static_cast<double>(ens.n_particles);
  std::vector<long long> exits_at(static_cast<std::size_t>(ens.horizon) + 1,
                                  0);
  long long survived = 0;
  for (int e : ens.exit_times) {
    if (e > 0)
      ++exits_at[static_cast<std::size_t>(e)];
    else
      ++survived;
  }

  // Cells: exit at t = 1..t_cut, then one pooled tail (late exits plus
  // survivors) so that every expected count is at least 5.
  double stat = 0.0;
  int cells = 0;
  double tail_obs = static_cast<double>(survived);
  double tail_exp = n * std::pow(alpha, ens.horizon);
  int t = 1;
  for (; t <= ens.horizon; ++t) {
    const double e_t =
        n * std::pow(alpha, t - 1) * (1.0 - alpha);
    const double rest =
        n * std::pow(alpha, t) - n * std::pow(alpha, ens.horizon);
    if (e_t < 5.0 || rest + tail_exp < 5.0) break;
    const double o_t = static_cast<double>(exits_at[static_cast<std::size_t>(t)]);
    stat += (o_t - e_t) * (o_t - e_t) / e_t;
    ++cells;
  }
  for (; t <= ens.horizon; ++t) {
    tail_obs += static_cast<double>(exits_at[static_cast<std::size_t>(t)]);
    tail_exp += n * std::pow(alpha, t - 1) * (1.0 - alpha);
  }
  if (tail_exp > 0.0) {
    stat += (tail_obs - tail_exp) * (tail_obs - tail_exp) / tail_exp;
    ++cells;
  }
  if (cells < 2)
    fail("insufficient_survivors", "open_dynamics",
         "too few cells for a goodness-of-fit test");

  GofResult res;
  res.statistic = stat;
  res.dof = cells - 1;
  // Wilson-Hilferty approximation of the 99th percentile.
  const double k = static_cast<double>(res.dof);
  const double z99 = 2.3263478740408408;
  const double c = 1.0 - 2.0 / (9.0 * k) + z99 * std::sqrt(2.0 / (9.0 * k));
  res.threshold_99 = k * c * c * c;
  res.pass = res.statistic <= res.threshold_99;
  return res;
}

//----------------------------------------------------------------------
// Conditional invariance and escape rate.
//----------------------------------------------------------------------

double check_conditional_invariance(const OpenSystem& sys,
                                    const SpectralSolution& sol,
                                    const std::vector<IntervalSet>& test_sets,
                                    int n) {
  if (n < 1 || n > 20)
    fail("domain_error", "open_dynamics",
         "conditional-invariance depth must be in 1..20, got " +
             std::to_string(n));
  const IntervalSet xn = survivor_approx(sys, n);
  const double nu_xn = nu_measure(sys, sol, xn);
  double worst = 0.0;
  for (const IntervalSet& a : test_sets) {
    IntervalSet pre = a;
    for (int i = 0; i < n; ++i) pre = preimage_set(sys.map, pre);
    const double lhs = nu_measure(sys, sol, pre.intersect(xn));
    const double rhs = nu_measure(sys, sol, a) * nu_xn;
    const double denom = std::max(std::abs(rhs), 1e-300);
    const double rel = (lhs == rhs) ? 0.0 : std::abs(lhs - rhs) / denom;
    worst = std::max(worst, rel);
  }
  return worst;
}

double escape_rate(double alpha) {
  if (!(alpha > 0.0))
    fail("domain_error", "open_dynamics",
         "escape rate needs alpha > 0, got " + std::to_string(alpha));
  return 0.0 - std::log(alpha);  // +0 for alpha = 1, not -0
}

void check_horizon_feasible(double alpha, long long n_particles,
                            int horizon) {
  if (!(alpha > 0.0) || !(alpha <= 1.0))
    fail("domain_error", "open_dynamics",
         "feasibility check needs alpha in (0,1], got " +
             std::to_string(alpha));
  const double lhs = static_cast<double>(horizon) * std::log(1.0 / alpha);
  const double rhs = std::log(static_cast<double>(n_particles) / 100.0);
  if (lhs > rhs)
    fail("infeasible_horizon", "open_dynamics",
         "expected survivors below 100: horizon " + std::to_string(horizon) +
             ", alpha " + std::to_string(alpha) + ", particles " +
             std::to_string(n_particles));
}

}  // namespace openevt
