#ifndef OPENEVT_ULAM_HPP
#define OPENEVT_ULAM_HPP

#include <optional>
#include <vector>

#include "openevt/interval_maps.hpp"

namespace openevt {

//----------------------------------------------------------------------
// Bin partitions of [0,1).
//----------------------------------------------------------------------

struct BinPartition {
  std::vector<double> breakpoints;  // sorted, breakpoints.front()=0, back()=1
  bool markov_aligned = false;

  int bins() const { return static_cast<int>(breakpoints.size()) - 1; }
  double width(int i) const { return breakpoints[i + 1] - breakpoints[i]; }
  Interval bin(int i) const {
    return Interval{breakpoints[i], breakpoints[i + 1]};
  }
  // Bin index containing x; x == 1 falls to the last bin.
  int locate(double x) const;
};

// k approximately-uniform bins whose breakpoints always include the
// hole endpoints and branch boundaries. markov_mode additionally closes
// the breakpoint set under forward images so the partition is Markov
// bin-wise; throws unsupported_mode if the closure does not stabilize
// (non-Markov map) or the map has non-affine branches.
BinPartition build_partition(const OpenSystem& sys, int k, bool markov_mode);

//----------------------------------------------------------------------
// Discretized transfer operators.
//
// Mass convention: M[i][j] = m(bin_i ∩ R ∩ T^{-1} bin_j) / m(bin_i).
// A piecewise-constant density f with per-bin masses m_i evolves as
// m' = m M (row vector times matrix); test functions evolve dually as
// M g. The retained region R is [0,1) for the closed variant, X0 for
// the open variant, and X0 minus the target ball for target_perturbed.
//----------------------------------------------------------------------

enum class OperatorVariant { closed, open, target_perturbed };

struct DiscretizedOperator {
  BinPartition partition;
  OperatorVariant variant = OperatorVariant::closed;
  IntervalSet retained;

  // CSR storage.
  std::vector<int> row_ptr;
  std::vector<int> col;
  std::vector<double> val;

  int bins() const { return partition.bins(); }
  double row_sum(int i) const;
  std::vector<double> apply_mass(const std::vector<double>& m) const;
  std::vector<double> apply_dual(const std::vector<double>& g) const;
};

DiscretizedOperator build_operator(const OpenSystem& sys,
                                   const BinPartition& partition,
                                   OperatorVariant variant,
                                   std::optional<Interval> ball = {});

//----------------------------------------------------------------------
// Spectral data.
//----------------------------------------------------------------------

struct EigPair {
  double lambda1 = 0.0;
  std::vector<double> right;  // test-function direction, M g = lambda g
  std::vector<double> left;   // mass direction, u M = lambda u
  double lambda2_abs = 0.0;
  int iterations = 0;
  double residual = 0.0;
};

// Power iteration with one-step deflation for |lambda2|. Deterministic
// start vectors; throws convergence_failure carrying the last residual.
EigPair leading_eigs(const DiscretizedOperator& op, double tol = 5e-13,
                     int max_iter = 100000, bool want_lambda2 = true);

struct SpectralSolution {
  BinPartition partition;
  double alpha = 0.0;
  std::vector<double> h0;    // density per bin, ∫_{X0} h0 dm = 1
  std::vector<double> mu0;   // probability mass per bin
  std::vector<double> lambda_weights;  // probability mass per bin
  std::vector<double> dual;  // right eigenvector g (density of mu0, unnormalized)
  double gap = 0.0;          // alpha - |lambda2|
  double h_minus = 0.0;      // min h0 over bins carrying lambda weight
};

SpectralSolution spectral_solution(const OpenSystem& sys,
                                   const BinPartition& partition);

//----------------------------------------------------------------------
// Measures derived from a spectral solution.
//----------------------------------------------------------------------

// nu(S) = ∫_{S ∩ X0} h0 dm.
double nu_measure(const OpenSystem& sys, const SpectralSolution& sol,
                  const IntervalSet& s);

// mu0(S) with sub-bin pieces resolved by the conformal pullback
// mu0(P) = mu0(T P) / (alpha |T'|); exact when piece endpoints reach
// partition breakpoints within `depth` forward steps (Markov-aligned
// queries), uniform-fraction fallback past the cap.
double mu0_measure(const OpenSystem& sys, const SpectralSolution& sol,
                   const IntervalSet& s, int depth = 48);

// Lambda(S) = ∫_S h0 dmu0 / ∫ h0 dmu0, conformal sub-bin resolution.
double lambda_measure(const OpenSystem& sys, const SpectralSolution& sol,
                      const IntervalSet& s, int depth = 48);

// Lambda(S) with plain uniform partial-bin interpolation.
double lambda_measure_interp(const SpectralSolution& sol,
                             const IntervalSet& s);

//----------------------------------------------------------------------
// Checks.
//----------------------------------------------------------------------

// max_f ||L f - L0 f||_1 over indicators of dyadic intervals of
// generation <= 10 rescaled to variation norm <= 1; bounded by m(H).
double check_operator_closeness(const OpenSystem& sys,
                                const BinPartition& partition);

// alpha > d_const / beta.
bool check_hole_smallness(const SpectralSolution& sol, double beta,
                          double d_const);

// |∫(L0 v) w dmu0 - alpha ∫ v (w∘T) dmu0| for per-bin test values v, w;
// the right side resolves v (w∘T) on preimage pieces conformally, so
// the residual is at solver precision in Markov-affine mode.
double duality_residual(const OpenSystem& sys, const SpectralSolution& sol,
                        const std::vector<double>& v,
                        const std::vector<double>& w);

// max over bins A of |mu0(T A) - alpha |T'_A| mu0(A)|.
double conformality_residual(const OpenSystem& sys,
                             const SpectralSolution& sol);

// |Lambda(T^{-1} A) - Lambda(A)| for a union A of partition bins.
double lambda_invariance_residual(const OpenSystem& sys,
                                  const SpectralSolution& sol,
                                  const IntervalSet& a);

//----------------------------------------------------------------------
// Perturbed-operator curves.
//----------------------------------------------------------------------

// P_n(M_n <= u_n) = alpha^{-(n-1)} ∫ (L~_n)^n h0 dm for each (n, u_n)
// pair: n applications of the ball-masked open operator, the mask
// keeping each bin's uncovered mass fraction, rescaled by alpha each
// step to avoid underflow.
std::vector<double> evd_operator_curve(const OpenSystem& sys,
                                       const SpectralSolution& sol,
                                       const BinPartition& partition,
                                       double z,
                                       const std::vector<int>& n_values,
                                       const std::vector<double>& u_values);

struct PerturbedSpectrum {
  std::vector<double> radii;
  std::vector<double> lambda_n;
  std::vector<double> delta_n;          // alpha * Lambda(B_n), interpolated
  std::vector<double> slope_estimates;  // (alpha - lambda_n) / delta_n
};

// Leading eigenvalue of the exactly-cut target-perturbed operator for
// each ball radius, paired with interpolated Lambda masses.
PerturbedSpectrum perturbed_eigenvalue_curve(const OpenSystem& sys,
                                             const SpectralSolution& sol,
                                             const BinPartition& partition,
                                             double z,
                                             const std::vector<double>& radii);

}  // namespace openevt

#endif
