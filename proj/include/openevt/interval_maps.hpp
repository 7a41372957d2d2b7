#ifndef OPENEVT_INTERVAL_MAPS_HPP
#define OPENEVT_INTERVAL_MAPS_HPP

#include <functional>
#include <string>
#include <vector>

namespace openevt {

//----------------------------------------------------------------------
// Intervals and finite unions of intervals.
//
// Convention: half-open [lo, hi). All set algebra is exact (no epsilon
// merging); adjacent components [a,b)[b,c) are fused. Everything lives
// inside the unit interval [0,1).
//----------------------------------------------------------------------

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  double length() const { return hi > lo ? hi - lo : 0.0; }
  bool empty() const { return hi <= lo; }
  bool contains(double x) const { return x >= lo && x < hi; }
};

class IntervalSet {
 public:
  IntervalSet() = default;
  explicit IntervalSet(Interval iv);
  explicit IntervalSet(std::vector<Interval> comps);
  static IntervalSet unit();  // [0,1)

  const std::vector<Interval>& components() const { return comps_; }
  bool empty() const { return comps_.empty(); }
  std::size_t size() const { return comps_.size(); }
  double measure() const;
  bool contains(double x) const;
  // Distance from x to the closure of the set; 0 if inside.
  double distance_to(double x) const;

  IntervalSet unite(const IntervalSet& other) const;
  IntervalSet intersect(const IntervalSet& other) const;
  IntervalSet complement() const;  // relative to [0,1)

 private:
  void normalize();
  std::vector<Interval> comps_;  // sorted, disjoint, nonempty
};

//----------------------------------------------------------------------
// Piecewise expanding maps of [0,1).
//
// Each branch is monotone on its domain interval. Affine branches carry
// exact slope/offset; non-affine branches carry value and derivative
// callables. Branch domains tile [0,1) without overlap.
//----------------------------------------------------------------------

struct Branch {
  Interval domain;
  bool affine = true;
  double slope = 2.0;   // used when affine
  double offset = 0.0;  // used when affine
  std::function<double(double)> value_fn;  // used when !affine
  std::function<double(double)> deriv_fn;  // used when !affine
  bool increasing = true;

  double value(double x) const;
  double deriv(double x) const;
  // Image of the branch domain as an interval (half-open; the measure
  // zero boundary slop of decreasing branches is absorbed).
  Interval image() const;
  // Image of a subinterval of the domain.
  Interval image_of(Interval piece) const;
};

struct PiecewiseExpandingMap {
  std::vector<Branch> branches;  // sorted by domain.lo, tiling [0,1)
  double beta = 0.0;             // inf |T'| over all branches
  bool markov = false;           // branch images are unions of domains
  bool full_branch = false;      // every branch maps onto [0,1)
};

// Builders. make_map validates the tiling and computes beta and flags.
PiecewiseExpandingMap make_map(std::vector<Branch> branches);
PiecewiseExpandingMap make_doubling();
PiecewiseExpandingMap make_tent();
// Full linear branches with slopes |s_i| > 1 and sum of 1/|s_i| equal
// to 1; branch i occupies width 1/|s_i| and maps onto [0,1).
PiecewiseExpandingMap make_linear_markov(const std::vector<double>& slopes);

//----------------------------------------------------------------------
// Open systems: a map together with a hole H and X0 = [0,1) \ H.
//----------------------------------------------------------------------

struct OpenSystem {
  PiecewiseExpandingMap map;
  IntervalSet hole;
  IntervalSet x0;
};

OpenSystem make_open_system(PiecewiseExpandingMap map, IntervalSet hole);

enum class TargetClass { periodic, nonperiodic, off_survivor };

struct TargetSpec {
  double z = 0.0;
  TargetClass cls = TargetClass::nonperiodic;
  int period = 0;      // minimal period when cls == periodic
  double tol = 1e-9;   // detection tolerance used
  int n_check = 64;    // survivor depth used
};

std::string target_class_name(TargetClass cls);

//----------------------------------------------------------------------
// Operations.
//----------------------------------------------------------------------

// T(x); right-continuous at shared branch endpoints, x in [0,1].
double evaluate(const PiecewiseExpandingMap& map, double x);

// T'(x); throws ambiguous_point at interior branch boundaries.
double derivative_at(const PiecewiseExpandingMap& map, double x);

// (T^p)'(x) along the orbit of x.
double orbit_derivative(const PiecewiseExpandingMap& map, double x, int p);

// Exact preimage T^{-1}(S) for affine branches; bracketing root finder
// (abs tol 1e-12) for non-affine monotone branches.
IntervalSet preimage_set(const PiecewiseExpandingMap& map,
                         const IntervalSet& s);

// Forward image T(S), computed branch-wise.
IntervalSet forward_image(const PiecewiseExpandingMap& map,
                          const IntervalSet& s);

// X_n = intersection of T^{-i}(X0), i = 0..n; exact interval algebra.
IntervalSet survivor_approx(const OpenSystem& sys, int n);

// True if some point of `window` has its first `depth` iterates inside
// X0. Iterates exact forward images; component count grows linearly in
// depth because interval endpoints come from the finitely many
// boundary-point orbits.
bool window_survives(const OpenSystem& sys, Interval window, int depth);

// Classify z as periodic (minimal period <= p_max), nonperiodic, or
// off_survivor, using tolerance-windowed survivor membership. Throws
// ambiguous_point if z is within tol of a branch boundary.
TargetSpec classify_target(const OpenSystem& sys, double z, int p_max = 16,
                           int n_check = 64, double tol = 1e-9);

// Distance from z to the backward orbit (up to `depth` preimages) of
// the branch boundary set.
double singular_set_distance(const PiecewiseExpandingMap& map, double z,
                             int depth);

}  // namespace openevt

#endif
