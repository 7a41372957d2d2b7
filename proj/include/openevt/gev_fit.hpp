#ifndef OPENEVT_GEV_FIT_HPP
#define OPENEVT_GEV_FIT_HPP

#include <vector>

#include "openevt/ulam.hpp"

namespace openevt {

//----------------------------------------------------------------------
// Block maxima and GEV fitting.
//----------------------------------------------------------------------

struct GevFit {
  double location = 0.0;  // b_n
  double scale = 0.0;     // 1 / a_n
  double shape = 0.0;     // xi; 0 means Gumbel
  int sample_size = 0;
  double ks_stat = 0.0;       // sup gap between empirical and fitted cdf
  bool gumbel_domain = true;  // |shape| <= 0.1
};

// Max of phi(., z) over the first block_len positions of every
// trajectory with at least block_len entries; callers pass
// survival-conditioned prefixes.
std::vector<double> block_maxima(
    const std::vector<std::vector<double>>& trajectories, double z,
    int block_len);

// Probability-weighted-moments estimator for (location, scale, shape);
// deterministic given the sample's order statistics, so permutation
// invariant. Needs at least 200 maxima.
GevFit fit_gev(std::vector<double> maxima);

struct NormalizingSequences {
  std::vector<int> n_values;
  std::vector<double> a_n;  // 1 / scale_n
  std::vector<double> b_n;  // location_n
};

NormalizingSequences normalizing_sequences(const std::vector<GevFit>& fits,
                                           const std::vector<int>& n_values);

//----------------------------------------------------------------------
// Local dimension of Lambda at the target.
//----------------------------------------------------------------------

struct DimensionEstimate {
  std::vector<double> u_values;
  std::vector<double> lambda_mass;  // Lambda(B(z, e^{-u}))
  std::vector<double> d_n;          // log(mass) / (-u)
  double t0_hat = 0.0;          // min of d_n over the deepest half
  double hd_lower_bound = 0.0;  // min(t0_hat, 1)
  double fdd_sup = 0.0;         // sup_n { u_n + log(mass_n) / t0_hat }
  bool atom_flag = false;       // quotients collapsing toward 0
};

// d_n(z) = log Lambda(B(z, e^{-u})) / (-u) with uniform within-bin
// interpolation; the minimum over the deepest half of the grid stands
// in for the liminf and lower-bounds the survivor-set dimension.
DimensionEstimate local_dimension(const SpectralSolution& sol, double z,
                                  const std::vector<double>& u_values);

}  // namespace openevt

#endif
