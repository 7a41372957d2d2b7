#include "openevt/interval_maps.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "openevt/errors.hpp"

namespace openevt {

namespace {
const char* kModule = "interval_maps";
}

//----------------------------------------------------------------------
// IntervalSet
//----------------------------------------------------------------------

IntervalSet::IntervalSet(Interval iv) : comps_{iv} { normalize(); }

IntervalSet::IntervalSet(std::vector<Interval> comps)
    : comps_(std::move(comps)) {
  normalize();
}

IntervalSet IntervalSet::unit() { return IntervalSet(Interval{0.0, 1.0}); }

void IntervalSet::normalize() {
  std::vector<Interval> clipped;
  clipped.reserve(comps_.size());
  for (Interval iv : comps_) {
    iv.lo = std::max(iv.lo, 0.0);
    iv.hi = std::min(iv.hi, 1.0);
    if (iv.hi > iv.lo) clipped.push_back(iv);
  }
  std::sort(clipped.begin(), clipped.end(),
            [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
  comps_.clear();
  for (const Interval& iv : clipped) {
    if (!comps_.empty() && iv.lo <= comps_.back().hi) {
      comps_.back().hi = std::max(comps_.back().hi, iv.hi);
    } else {
      comps_.push_back(iv);
    }
  }
}

double IntervalSet::measure() const {
  double m = 0.0;
  for (const Interval& iv : comps_) m += iv.length();
  return m;
}

bool IntervalSet::contains(double x) const {
  for (const Interval& iv : comps_) {
    if (x < iv.lo) return false;
    if (x < iv.hi) return true;
  }
  return false;
}

double IntervalSet::distance_to(double x) const {
  double d = std::numeric_limits<double>::infinity();
  for (const Interval& iv : comps_) {
    if (x < iv.lo) {
      d = std::min(d, iv.lo - x);
    } else if (x > iv.hi) {
      d = std::min(d, x - iv.hi);
    } else {
      return 0.0;
    }
  }
  return d;
}

IntervalSet IntervalSet::unite(const IntervalSet& other) const {
  std::vector<Interval> all = comps_;
  all.insert(all.end(), other.comps_.begin(), other.comps_.end());
  return IntervalSet(std::move(all));
}

IntervalSet IntervalSet::intersect(const IntervalSet& other) const {
  std::vector<Interval> out;
  std::size_t i = 0, j = 0;
  while (i < comps_.size() && j < other.comps_.size()) {
    const Interval& a = comps_[i];
    const Interval& b = other.comps_[j];
    double lo = std::max(a.lo, b.lo);
    double hi = std::min(a.hi, b.hi);
    if (hi > lo) out.push_back(Interval{lo, hi});
    if (a.hi < b.hi) {
      ++i;
    } else {
      ++j;
    }
  }
  return IntervalSet(std::move(out));
}

IntervalSet IntervalSet::complement() const {
  std::vector<Interval> out;
  double cursor = 0.0;
  for (const Interval& iv : comps_) {
    if (iv.lo > cursor) out.push_back(Interval{cursor, iv.lo});
    cursor = std::max(cursor, iv.hi);
  }
  if (cursor < 1.0) out.push_back(Interval{cursor, 1.0});
  return IntervalSet(std::move(out));
}

//----------------------------------------------------------------------
// Branch
//----------------------------------------------------------------------

double Branch::value(double x) const {
  if (affine) return slope * x + offset;
  return value_fn(x);
}

double Branch::deriv(double x) const {
  if (affine) return slope;
  return deriv_fn(x);
}

Interval Branch::image() const { return image_of(domain); }

Interval Branch::image_of(Interval piece) const {
  double va = value(piece.lo);
  double vb = value(piece.hi);
  double lo = std::min(va, vb);
  double hi = std::max(va, vb);
  // Guard tiny negative drift from callable branches.
  lo = std::max(lo, 0.0);
  hi = std::min(hi, 1.0 + 1e-12);
  return Interval{lo, std::min(hi, 1.0)};
}

//----------------------------------------------------------------------
// Map builders
//----------------------------------------------------------------------

PiecewiseExpandingMap make_map(std::vector<Branch> branches) {
  if (branches.empty())
    fail("invalid_map", kModule, "map needs at least one branch");
  std::sort(branches.begin(), branches.end(),
            [](const Branch& a, const Branch& b) {
              return a.domain.lo < b.domain.lo;
            });
  double cursor = 0.0;
  for (Branch& b : branches) {
    if (std::abs(b.domain.lo - cursor) > 1e-12)
      fail("invalid_map", kModule, "branch domains must tile [0,1)");
    if (b.domain.empty())
      fail("invalid_map", kModule, "empty branch domain");
    if (b.affine) b.increasing = b.slope > 0.0;
    cursor = b.domain.hi;
  }
  if (std::abs(cursor - 1.0) > 1e-12)
    fail("invalid_map", kModule, "branch domains must tile [0,1)");

  PiecewiseExpandingMap map;
  map.branches = std::move(branches);

  // beta = inf |T'|; sample callable branches.
  double beta = std::numeric_limits<double>::infinity();
  for (const Branch& b : map.branches) {
    if (b.affine) {
      beta = std::min(beta, std::abs(b.slope));
    } else {
      const int kSamples = 257;
      for (int i = 0; i < kSamples; ++i) {
        double x = b.domain.lo + (b.domain.hi - b.domain.lo) * i / (kSamples - 1);
        x = std::min(x, b.domain.hi - 1e-12);
        beta = std::min(beta, std::abs(b.deriv(x)));
      }
    }
  }
  map.beta = beta;
  if (beta <= 1.0)
    fail("invalid_map", kModule, "map is not uniformly expanding");

  // full_branch: every image covers [0,1) up to endpoint slop.
  map.full_branch = true;
  for (const Branch& b : map.branches) {
    Interval im = b.image();
    if (im.lo > 1e-12 || im.hi < 1.0 - 1e-12) map.full_branch = false;
  }

  // markov: branch endpoints map onto branch endpoints.
  std::set<double> cuts;
  for (const Branch& b : map.branches) {
    cuts.insert(b.domain.lo);
    cuts.insert(b.domain.hi);
  }
  map.markov = true;
  for (const Branch& b : map.branches) {
    Interval im = b.image();
    for (double e : {im.lo, im.hi}) {
      bool hit = false;
      for (double c : cuts)
        if (std::abs(c - e) <= 1e-12) hit = true;
      if (!hit) map.markov = false;
    }
  }
  return map;
}

PiecewiseExpandingMap make_doubling() {
  Branch b0{Interval{0.0, 0.5}, true, 2.0, 0.0, nullptr, nullptr, true};
  Branch b1{Interval{0.5, 1.0}, true, 2.0, -1.0, nullptr, nullptr, true};
  return make_map({b0, b1});
}

PiecewiseExpandingMap make_tent() {
  Branch b0{Interval{0.0, 0.5}, true, 2.0, 0.0, nullptr, nullptr, true};
  Branch b1{Interval{0.5, 1.0}, true, -2.0, 2.0, nullptr, nullptr, false};
  return make_map({b0, b1});
}

PiecewiseExpandingMap make_linear_markov(const std::vector<double>& slopes) {
  if (slopes.empty())
    fail("invalid_map", kModule, "slope table is empty");
  double total = 0.0;
  for (double s : slopes) {
    if (std::abs(s) <= 1.0)
      fail("invalid_map", kModule, "slopes must exceed 1 in modulus");
    total += 1.0 / std::abs(s);
  }
  if (std::abs(total - 1.0) > 1e-9)
    fail("invalid_map", kModule,
         "reciprocal slopes must sum to 1 so full branches tile [0,1)");
  std::vector<Branch> branches;
  double cursor = 0.0;
  for (double s : slopes) {
    double w = 1.0 / std::abs(s);
    Branch b;
    b.domain = Interval{cursor, cursor + w};
    b.affine = true;
    if (s > 0) {
      b.slope = s;
      b.offset = -s * cursor;  // maps [cursor, cursor+w) onto [0,1)
      b.increasing = true;
    } else {
      b.slope = s;
      b.offset = -s * (cursor + w);  // maps onto (0,1] ~ [0,1)
      b.increasing = false;
    }
    branches.push_back(b);
    cursor += w;
  }
  branches.back().domain.hi = 1.0;
  return make_map(std::move(branches));
}

OpenSystem make_open_system(PiecewiseExpandingMap map, IntervalSet hole) {
  OpenSystem sys;
  sys.map = std::move(map);
  sys.hole = std::move(hole);
  sys.x0 = sys.hole.complement();
  if (sys.x0.empty())
    fail("invalid_map", kModule, "hole covers the whole interval");
  return sys;
}

std::string target_class_name(TargetClass cls) {
  switch (cls) {
    case TargetClass::periodic: return "periodic";
    case TargetClass::nonperiodic: return "nonperiodic";
    case TargetClass::off_survivor: return "off_survivor";
  }
  return "unknown";
}

//----------------------------------------------------------------------
// Point operations
//----------------------------------------------------------------------

namespace {

// Branch owning x under the right-continuous convention; x == 1 falls
// to the last branch.
const Branch& branch_at(const PiecewiseExpandingMap& map, double x) {
  if (x >= 1.0) return map.branches.back();
  for (const Branch& b : map.branches)
    if (b.domain.contains(x)) return b;
  return map.branches.front();  // x < 0 is clamped by callers
}

}  // namespace

double evaluate(const PiecewiseExpandingMap& map, double x) {
  if (x < 0.0 || x > 1.0)
    fail("invalid_map", kModule, "evaluate: point outside [0,1]");
  const Branch& b = branch_at(map, x);
  double y = b.value(x);
  return std::clamp(y, 0.0, 1.0);
}

double derivative_at(const PiecewiseExpandingMap& map, double x) {
  for (std::size_t i = 1; i < map.branches.size(); ++i) {
    if (x == map.branches[i].domain.lo)
      fail("ambiguous_point", kModule,
           "derivative requested at an interior branch boundary");
  }
  return branch_at(map, x).deriv(x);
}

double orbit_derivative(const PiecewiseExpandingMap& map, double x, int p) {
  double d = 1.0;
  double y = x;
  for (int i = 0; i < p; ++i) {
    d *= derivative_at(map, y);
    y = evaluate(map, y);
  }
  return d;
}

//----------------------------------------------------------------------
// Preimages and survivor sets
//----------------------------------------------------------------------

namespace {

// Solve value(x) = target for a monotone callable branch by bisection
// over [lo, hi]; abs tol 1e-12 on x.
double invert_callable(const Branch& b, double target) {
  double lo = b.domain.lo, hi = b.domain.hi;
  double flo = b.value(lo) - target;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    double fm = b.value(mid) - target;
    if ((fm <= 0) == (flo <= 0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
    if (hi - lo < 1e-12) break;
  }
  return 0.5 * (lo + hi);
}

// Preimage of [c,d) inside one branch.
Interval branch_preimage(const Branch& b, double c, double d) {
  if (b.affine) {
    double x1 = (c - b.offset) / b.slope;
    double x2 = (d - b.offset) / b.slope;
    Interval iv{std::min(x1, x2), std::max(x1, x2)};
    return Interval{std::max(iv.lo, b.domain.lo), std::min(iv.hi, b.domain.hi)};
  }
  Interval im = b.image();
  double lo_t = std::max(c, im.lo);
  double hi_t = std::min(d, im.hi);
  if (hi_t <= lo_t) return Interval{0.0, 0.0};
  double x1 = invert_callable(b, lo_t);
  double x2 = invert_callable(b, hi_t);
  Interval iv{std::min(x1, x2), std::max(x1, x2)};
  return Interval{std::max(iv.lo, b.domain.lo), std::min(iv.hi, b.domain.hi)};
}

}  // namespace

IntervalSet preimage_set(const PiecewiseExpandingMap& map,
                         const IntervalSet& s) {
  std::vector<Interval> out;
  for (const Interval& iv : s.components()) {
    for (const Branch& b : map.branches) {
      Interval pre = branch_preimage(b, iv.lo, iv.hi);
      if (!pre.empty()) out.push_back(pre);
    }
  }
  return IntervalSet(std::move(out));
}

IntervalSet forward_image(const PiecewiseExpandingMap& map,
                          const IntervalSet& s) {
  std::vector<Interval> out;
  for (const Interval& comp : s.components()) {
    for (const Branch& b : map.branches) {
      double lo = std::max(comp.lo, b.domain.lo);
      double hi = std::min(comp.hi, b.domain.hi);
      if (hi > lo) out.push_back(b.image_of(Interval{lo, hi}));
    }
  }
  return IntervalSet(std::move(out));
}

IntervalSet survivor_approx(const OpenSystem& sys, int n) {
  IntervalSet x = sys.x0;
  for (int i = 0; i < n; ++i) {
    x = preimage_set(sys.map, x).intersect(sys.x0);
    if (x.empty()) break;
  }
  return x;
}

//----------------------------------------------------------------------
// Windowed survival and target classification
//----------------------------------------------------------------------

bool window_survives(const OpenSystem& sys, Interval window, int depth) {
  IntervalSet s = IntervalSet(window).intersect(sys.x0);
  for (int d = 0; d < depth && !s.empty(); ++d)
    s = forward_image(sys.map, s).intersect(sys.x0);
  return !s.empty();
}

TargetSpec classify_target(const OpenSystem& sys, double z, int p_max,
                           int n_check, double tol) {
  if (z < 0.0 || z >= 1.0)
    fail("invalid_map", kModule, "target must lie in [0,1)");
  for (std::size_t i = 1; i < sys.map.branches.size(); ++i) {
    if (std::abs(z - sys.map.branches[i].domain.lo) <= tol)
      fail("ambiguous_point", kModule,
           "target is within tolerance of a branch boundary");
  }

  TargetSpec spec;
  spec.z = z;
  spec.tol = tol;
  spec.n_check = n_check;

  Interval window{std::max(z - tol, 0.0), std::min(z + tol, 1.0)};
  if (window.hi <= window.lo) window.hi = window.lo + 1e-15;
  if (!window_survives(sys, window, n_check)) {
    spec.cls = TargetClass::off_survivor;
    return spec;
  }

  // Period scan on the forward orbit of z itself. A hit within tol at
  // step p, with the whole cycle avoiding the hole, classifies z as
  // periodic with minimal period p.
  double y = z;
  bool in_hole = sys.hole.contains(z);
  for (int p = 1; p <= p_max && !in_hole; ++p) {
    y = evaluate(sys.map, y);
    if (sys.hole.contains(y)) break;
    if (std::abs(y - z) <= tol) {
      spec.cls = TargetClass::periodic;
      spec.period = p;
      return spec;
    }
  }
  spec.cls = TargetClass::nonperiodic;
  return spec;
}

double singular_set_distance(const PiecewiseExpandingMap& map, double z,
                             int depth) {
  if (depth < 0 || depth > 24)
    fail("invalid_map", kModule, "singular set depth must be in [0,24]");
  std::vector<double> gen;
  for (const Branch& b : map.branches) {
    gen.push_back(b.domain.lo);
    gen.push_back(b.domain.hi);
  }
  std::sort(gen.begin(), gen.end());
  gen.erase(std::unique(gen.begin(), gen.end()), gen.end());

  double best = std::numeric_limits<double>::infinity();
  for (double pt : gen) best = std::min(best, std::abs(z - pt));

  for (int d = 0; d < depth; ++d) {
    std::vector<double> next;
    next.reserve(gen.size() * map.branches.size());
    for (double pt : gen) {
      for (const Branch& b : map.branches) {
        double x;
        if (b.affine) {
          x = (pt - b.offset) / b.slope;
        } else {
          Interval im = b.image();
          if (pt < im.lo - 1e-12 || pt > im.hi + 1e-12) continue;
          x = invert_callable(b, std::clamp(pt, im.lo, im.hi));
        }
        if (x >= b.domain.lo - 1e-12 && x <= b.domain.hi + 1e-12)
          next.push_back(std::clamp(x, b.domain.lo, b.domain.hi));
      }
    }
    std::sort(next.begin(), next.end());
    next.erase(std::unique(next.begin(), next.end()), next.end());
    for (double pt : next) best = std::min(best, std::abs(z - pt));
    gen = std::move(next);
    if (gen.empty()) break;
  }
  return best;
}

}  // namespace openevt
