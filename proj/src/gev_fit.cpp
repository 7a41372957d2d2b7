#include "openevt/gev_fit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "openevt/errors.hpp"
#include "openevt/extremes.hpp"

namespace openevt {

namespace {
const char* kModule = "gev_fit";
const double kEulerGamma = 0.57721566490153286;

double gev_cdf(double x, const GevFit& fit) {
  const double s = (x - fit.location) / fit.scale;
  if (fit.shape == 0.0) return std::exp(-std::exp(-s));
  const double t = 1.0 + fit.shape * s;
  if (t <= 0.0) return fit.shape > 0.0 ? 0.0 : 1.0;
  return std::exp(-std::pow(t, -1.0 / fit.shape));
}
}  // namespace

std::vector<double> block_maxima(
    const std::vector<std::vector<double>>& trajectories, double z,
    int block_len) {
  if (block_len < 16)
    fail("domain_error", kModule, "block length must be at least 16");
  std::vector<double> maxima;
  for (const auto& traj : trajectories) {
    if (static_cast<int>(traj.size()) < block_len) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < block_len; ++i)
      best = std::max(best, observable_phi(traj[static_cast<std::size_t>(i)], z));
    maxima.push_back(best);
  }
  if (maxima.empty())
    fail("insufficient_data", kModule,
         "no trajectory reaches the block length " +
             std::to_string(block_len));
  return maxima;
}

GevFit fit_gev(std::vector<double> maxima) {
  const std::size_t n = maxima.size();
  if (n < 200)
    fail("insufficient_data", kModule,
         "need at least 200 block maxima, got " + std::to_string(n));
  std::sort(maxima.begin(), maxima.end());
  if (maxima.front() == maxima.back())
    fail("degenerate_sample", kModule, "all block maxima are equal");

  // Probability-weighted moments b0, b1, b2 from order statistics.
  const double dn = static_cast<double>(n);
  double b0 = 0.0, b1 = 0.0, b2 = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double x = maxima[j];
    const double fj = static_cast<double>(j);
    b0 += x;
    b1 += x * fj / (dn - 1.0);
    b2 += x * fj * (fj - 1.0) / ((dn - 1.0) * (dn - 2.0));
  }
  b0 /= dn;
  b1 /= dn;
  b2 /= dn;

  GevFit fit;
  fit.sample_size = static_cast<int>(n);
  const double lam2 = 2.0 * b1 - b0;
  const double c = lam2 / (3.0 * b2 - b0) - std::log(2.0) / std::log(3.0);
  const double kh = 7.8590 * c + 2.9554 * c * c;
  if (std::abs(kh) < 1e-9) {
    fit.shape = 0.0;
    fit.scale = lam2 / std::log(2.0);
    fit.location = b0 - kEulerGamma * fit.scale;
  } else {
    const double g = std::tgamma(1.0 + kh);
    fit.shape = -kh;
    fit.scale = lam2 * kh / (g * (1.0 - std::pow(2.0, -kh)));
    fit.location = b0 + fit.scale * (g - 1.0) / kh;
  }
  if (!(fit.scale > 0.0))
    fail("degenerate_sample", kModule, "fitted scale is not positive");
  fit.gumbel_domain = std::abs(fit.shape) <= 0.1;

  for (std::size_t j = 0; j < n; ++j) {
    const double f = gev_cdf(maxima[j], fit);
    const double lo = static_cast<double>(j) / dn;
    const double hi = static_cast<double>(j + 1) / dn;
    fit.ks_stat = std::max(fit.ks_stat, std::max(f - lo, hi - f));
  }
  return fit;
}

NormalizingSequences normalizing_sequences(const std::vector<GevFit>& fits,
                                           const std::vector<int>& n_values) {
  if (fits.size() != n_values.size() || fits.empty())
    fail("domain_error", kModule, "need one fit per n value");
  NormalizingSequences seq;
  seq.n_values = n_values;
  for (const GevFit& f : fits) {
    if (!(f.scale > 0.0))
      fail("degenerate_sample", kModule, "fit carries a nonpositive scale");
    seq.a_n.push_back(1.0 / f.scale);
    seq.b_n.push_back(f.location);
  }
  return seq;
}

DimensionEstimate local_dimension(const SpectralSolution& sol, double z,
                                  const std::vector<double>& u_values) {
  if (u_values.empty()) fail("domain_error", kModule, "empty level grid");
  for (std::size_t i = 0; i < u_values.size(); ++i) {
    if (!(u_values[i] > 0.0))
      fail("domain_error", kModule, "levels must be positive");
    if (i > 0 && u_values[i] <= u_values[i - 1])
      fail("domain_error", kModule, "levels must increase");
  }

  DimensionEstimate est;
  est.u_values = u_values;
  for (double u : u_values) {
    const double r = std::exp(-u);
    const double mass =
        lambda_measure_interp(sol, IntervalSet(Interval{z - r, z + r}));
    if (!(mass > 0.0))
      fail("off_support", kModule,
           "Lambda ball mass vanishes at level u = " + std::to_string(u));
    est.lambda_mass.push_back(mass);
    est.d_n.push_back(std::log(mass) / (-u));
  }

  // liminf surrogate: minimum over the deepest half of the grid.
  const std::size_t m = u_values.size();
  est.t0_hat = est.d_n[m / 2];
  for (std::size_t i = m / 2; i < m; ++i)
    est.t0_hat = std::min(est.t0_hat, est.d_n[i]);
  est.hd_lower_bound = std::min(est.t0_hat, 1.0);
  est.atom_flag = est.t0_hat < 0.05;
  if (est.t0_hat > 0.0) {
    est.fdd_sup = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i)
      est.fdd_sup = std::max(
          est.fdd_sup, u_values[i] + std::log(est.lambda_mass[i]) / est.t0_hat);
  }
  return est;
}

}  // namespace openevt
