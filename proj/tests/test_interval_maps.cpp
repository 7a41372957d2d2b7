#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "openevt/errors.hpp"
#include "openevt/interval_maps.hpp"

using namespace openevt;

namespace {

OpenSystem golden_system() {
  return make_open_system(make_doubling(),
                          IntervalSet(Interval{0.0, 0.25}));
}

// Nonperiodic reference target: binary expansion avoids "00" blocks, so
// the orbit never enters [0,1/4); all shift self-distances exceed 3e-2.
const double kZStar = 0x1.7fffdb5b5b5b4p-1;

}  // namespace

TEST_CASE("interval set algebra") {
  IntervalSet a(std::vector<Interval>{{0.0, 0.25}, {0.5, 0.75}});
  IntervalSet b(std::vector<Interval>{{0.125, 0.5}});

  CHECK(a.measure() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a.contains(0.1));
  CHECK(!a.contains(0.25));  // half open
  CHECK(a.contains(0.5));

  IntervalSet u = a.unite(b);
  CHECK(u.size() == 1);
  CHECK(u.components()[0].lo == 0.0);
  CHECK(u.components()[0].hi == 0.75);

  IntervalSet i = a.intersect(b);
  CHECK(i.size() == 1);
  CHECK(i.components()[0].lo == 0.125);
  CHECK(i.components()[0].hi == 0.25);

  IntervalSet c = a.complement();
  CHECK(c.size() == 2);
  CHECK(c.measure() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(c.complement().measure() == doctest::Approx(a.measure()));

  // Adjacent components fuse.
  IntervalSet adj(std::vector<Interval>{{0.0, 0.5}, {0.5, 1.0}});
  CHECK(adj.size() == 1);
  CHECK(adj.measure() == 1.0);

  CHECK(a.distance_to(0.1) == 0.0);
  CHECK(a.distance_to(0.3) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(a.distance_to(0.9) == doctest::Approx(0.15).epsilon(1e-15));
}

TEST_CASE("builtin maps evaluate and differentiate") {
  auto doubling = make_doubling();
  CHECK(evaluate(doubling, 0.3) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(evaluate(doubling, 0.75) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(evaluate(doubling, 0.5) == 0.0);  // right continuous
  CHECK(evaluate(doubling, 1.0) == 1.0);
  CHECK(derivative_at(doubling, 0.3) == 2.0);
  CHECK_THROWS_AS(derivative_at(doubling, 0.5), NamedError);
  CHECK(doubling.beta == 2.0);
  CHECK(doubling.markov);
  CHECK(doubling.full_branch);

  auto tent = make_tent();
  CHECK(evaluate(tent, 0.25) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(evaluate(tent, 0.75) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(evaluate(tent, 0.5) == 1.0);
  CHECK(derivative_at(tent, 0.75) == -2.0);

  CHECK(orbit_derivative(doubling, 1.0 / 3.0, 2) ==
        doctest::Approx(4.0).epsilon(1e-15));

  try {
    derivative_at(doubling, 0.5);
    CHECK(false);
  } catch (const NamedError& e) {
    CHECK(e.name() == "ambiguous_point");
  }
}

TEST_CASE("linear markov builder") {
  auto m = make_linear_markov({2.0, 4.0, 4.0});
  REQUIRE(m.branches.size() == 3);
  CHECK(m.branches[1].domain.lo == 0.5);
  CHECK(m.branches[1].domain.hi == 0.75);
  CHECK(evaluate(m, 0.6) == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(m.beta == 2.0);
  CHECK(m.full_branch);
  CHECK(m.markov);

  auto triple = make_linear_markov({3.0, 3.0, 3.0});
  CHECK(evaluate(triple, 0.5) == doctest::Approx(0.5).epsilon(1e-14));

  CHECK_THROWS_AS(make_linear_markov({2.0, 2.0, 2.0}), NamedError);
}

TEST_CASE("preimages are exact for affine branches") {
  auto doubling = make_doubling();
  IntervalSet s(Interval{0.25, 1.0});
  IntervalSet pre = preimage_set(doubling, s);
  REQUIRE(pre.size() == 2);
  CHECK(pre.components()[0].lo == 0.125);
  CHECK(pre.components()[0].hi == 0.5);
  CHECK(pre.components()[1].lo == 0.625);
  CHECK(pre.components()[1].hi == 1.0);

  auto tent = make_tent();
  IntervalSet pre_t = preimage_set(tent, IntervalSet(Interval{0.0, 0.5}));
  REQUIRE(pre_t.size() == 2);
  CHECK(pre_t.components()[0].lo == 0.0);
  CHECK(pre_t.components()[0].hi == 0.25);
  CHECK(pre_t.components()[1].lo == 0.75);
  CHECK(pre_t.components()[1].hi == 1.0);
  CHECK(pre_t.measure() == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("preimages via root finder match affine truth") {
  // Same doubling map, but the first branch is presented as a callable.
  Branch b0;
  b0.domain = Interval{0.0, 0.5};
  b0.affine = false;
  b0.value_fn = [](double x) { return 2.0 * x; };
  b0.deriv_fn = [](double) { return 2.0; };
  b0.increasing = true;
  Branch b1{Interval{0.5, 1.0}, true, 2.0, -1.0, nullptr, nullptr, true};
  auto m = make_map({b0, b1});

  IntervalSet s(Interval{0.25, 0.75});
  IntervalSet pre = preimage_set(m, s);
  IntervalSet pre_exact = preimage_set(make_doubling(), s);
  REQUIRE(pre.size() == pre_exact.size());
  for (std::size_t i = 0; i < pre.size(); ++i) {
    CHECK(pre.components()[i].lo ==
          doctest::Approx(pre_exact.components()[i].lo).epsilon(1e-10));
    CHECK(pre.components()[i].hi ==
          doctest::Approx(pre_exact.components()[i].hi).epsilon(1e-10));
  }
}

TEST_CASE("nonlinear expanding map basics") {
  // T(x) = 2x + 0.2 x (0.5 - x) on [0,1/2), affine on [1/2,1).
  Branch b0;
  b0.domain = Interval{0.0, 0.5};
  b0.affine = false;
  b0.value_fn = [](double x) { return 2.0 * x + 0.2 * x * (0.5 - x); };
  b0.deriv_fn = [](double x) { return 2.0 + 0.2 * (0.5 - 2.0 * x); };
  b0.increasing = true;
  Branch b1{Interval{0.5, 1.0}, true, 2.0, -1.0, nullptr, nullptr, true};
  auto m = make_map({b0, b1});
  CHECK(m.beta == doctest::Approx(1.9).epsilon(1e-9));

  IntervalSet pre = preimage_set(m, IntervalSet(Interval{0.3, 0.6}));
  for (const Interval& iv : pre.components()) {
    if (iv.lo < 0.5 && iv.lo > 0.0) {
      CHECK(b0.value(iv.lo) == doctest::Approx(0.3).epsilon(1e-10));
    }
  }
}

TEST_CASE("survivor sets of the quarter-hole doubling map") {
  auto sys = golden_system();
  CHECK(sys.x0.measure() == doctest::Approx(0.75).epsilon(1e-15));

  // Exact dyadic measures of the first survivor sets.
  IntervalSet x1 = survivor_approx(sys, 1);
  CHECK(x1.measure() == doctest::Approx(0.625).epsilon(1e-15));
  REQUIRE(x1.size() == 2);
  CHECK(x1.components()[0].lo == 0.25);
  CHECK(x1.components()[0].hi == 0.5);
  CHECK(x1.components()[1].lo == 0.625);
  CHECK(x1.components()[1].hi == 1.0);

  CHECK(survivor_approx(sys, 2).measure() ==
        doctest::Approx(0.5).epsilon(1e-15));
  CHECK(survivor_approx(sys, 3).measure() ==
        doctest::Approx(0.40625).epsilon(1e-15));
  CHECK(survivor_approx(sys, 4).measure() ==
        doctest::Approx(0.328125).epsilon(1e-15));

  // Measure ratios approach the survival rate (1+sqrt(5))/4.
  const double alpha = (1.0 + std::sqrt(5.0)) / 4.0;
  double m19 = survivor_approx(sys, 19).measure();
  double m20 = survivor_approx(sys, 20).measure();
  CHECK(m20 / m19 == doctest::Approx(alpha).epsilon(1e-4));

  // Nesting.
  IntervalSet x5 = survivor_approx(sys, 5);
  IntervalSet x6 = survivor_approx(sys, 6);
  CHECK(x6.intersect(x5).measure() == doctest::Approx(x6.measure()));

  // Distance from the dead target 0.1 to the depth-20 survivor set.
  // The leftmost limit-set point is 1/3 (binary 0101...; anything in
  // [1/4,1/3) hits a 00 block and falls in the hole), so the distance
  // converges to 7/30 from below.
  double d = survivor_approx(sys, 20).distance_to(0.1);
  CHECK(d == doctest::Approx(7.0 / 30.0).epsilon(1e-5));
  CHECK(d <= 7.0 / 30.0);
}

TEST_CASE("windowed survival") {
  auto sys = golden_system();
  CHECK(window_survives(sys, Interval{1.0 / 3.0 - 1e-9, 1.0 / 3.0 + 1e-9},
                        64));
  CHECK(!window_survives(sys, Interval{0.1 - 1e-9, 0.1 + 1e-9}, 1));
  CHECK(window_survives(sys, Interval{kZStar - 1e-9, kZStar + 1e-9}, 64));
}

TEST_CASE("target classification") {
  auto sys = golden_system();

  TargetSpec periodic = classify_target(sys, 1.0 / 3.0);
  CHECK(periodic.cls == TargetClass::periodic);
  CHECK(periodic.period == 2);

  TargetSpec p2 = classify_target(sys, 2.0 / 3.0);
  CHECK(p2.cls == TargetClass::periodic);
  CHECK(p2.period == 2);

  TargetSpec dead = classify_target(sys, 0.1);
  CHECK(dead.cls == TargetClass::off_survivor);

  // Fixed point 0 sits inside the hole.
  TargetSpec zero = classify_target(sys, 0.0);
  CHECK(zero.cls == TargetClass::off_survivor);

  TargetSpec nonper = classify_target(sys, kZStar);
  CHECK(nonper.cls == TargetClass::nonperiodic);

  CHECK_THROWS_AS(classify_target(sys, 0.5), NamedError);
  CHECK_THROWS_AS(classify_target(sys, 0.5 + 1e-12), NamedError);

  // Period-3 orbit of the doubling map: 1/7 -> 2/7 -> 4/7 -> 1/7, alive
  // for a hole inside (4/7, 6/7).
  auto sys7 = make_open_system(make_doubling(),
                               IntervalSet(Interval{0.6, 0.8}));
  TargetSpec p3 = classify_target(sys7, 1.0 / 7.0);
  CHECK(p3.cls == TargetClass::periodic);
  CHECK(p3.period == 3);
}

TEST_CASE("singular set distance") {
  auto doubling = make_doubling();
  // Nearest dyadic k/2^g (g <= 11) to 1/3 is exactly 1/6144 away.
  CHECK(singular_set_distance(doubling, 1.0 / 3.0, 10) ==
        doctest::Approx(1.0 / 6144.0).epsilon(1e-12));
  CHECK(singular_set_distance(doubling, 0.5, 0) == 0.0);
  CHECK(singular_set_distance(doubling, 0.26, 1) ==
        doctest::Approx(0.01).epsilon(1e-12));
}

TEST_CASE("map validation") {
  Branch gap0{Interval{0.0, 0.4}, true, 2.0, 0.0, nullptr, nullptr, true};
  Branch gap1{Interval{0.5, 1.0}, true, 2.0, -1.0, nullptr, nullptr, true};
  CHECK_THROWS_AS(make_map({gap0, gap1}), NamedError);

  Branch slow0{Interval{0.0, 0.5}, true, 0.9, 0.0, nullptr, nullptr, true};
  Branch slow1{Interval{0.5, 1.0}, true, 2.0, -1.0, nullptr, nullptr, true};
  CHECK_THROWS_AS(make_map({slow0, slow1}), NamedError);
}
