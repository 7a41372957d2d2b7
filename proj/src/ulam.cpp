#include "openevt/ulam.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <string>

#include "openevt/errors.hpp"

namespace openevt {

namespace {
const char* kModule = "ulam";

// Insert x into the sorted vector unless an existing point lies within
// tol; returns true if inserted.
bool insert_point(std::vector<double>& pts, double x, double tol = 1e-12) {
  auto it = std::lower_bound(pts.begin(), pts.end(), x);
  if (it != pts.end() && *it - x <= tol) return false;
  if (it != pts.begin() && x - *(it - 1) <= tol) return false;
  pts.insert(it, x);
  return true;
}

}  // namespace

//----------------------------------------------------------------------
// BinPartition
//----------------------------------------------------------------------

int BinPartition::locate(double x) const {
  if (x >= breakpoints.back()) return bins() - 1;
  if (x <= breakpoints.front()) return 0;
  auto it = std::upper_bound(breakpoints.begin(), breakpoints.end(), x);
  return static_cast<int>(it - breakpoints.begin()) - 1;
}

BinPartition build_partition(const OpenSystem& sys, int k, bool markov_mode) {
  if (k < 2) fail("invalid_map", kModule, "partition needs k >= 2");

  std::vector<double> pts = {0.0, 1.0};
  for (const Branch& b : sys.map.branches) {
    insert_point(pts, b.domain.lo);
    insert_point(pts, b.domain.hi);
  }
  for (const Interval& iv : sys.hole.components()) {
    insert_point(pts, iv.lo);
    insert_point(pts, iv.hi);
  }

  auto sweep_closure = [&](std::vector<double>& v) {
    // Close the point set under forward images; images of a boundary
    // point under both adjacent branches are included.
    const std::size_t cap = 65536;
    for (int round = 0; round < 64; ++round) {
      bool changed = false;
      std::vector<double> snapshot = v;
      for (double p : snapshot) {
        for (const Branch& b : sys.map.branches) {
          if (p < b.domain.lo - 1e-12 || p > b.domain.hi + 1e-12) continue;
          double y = std::clamp(b.value(std::clamp(p, b.domain.lo,
                                                   b.domain.hi)),
                                0.0, 1.0);
          if (insert_point(v, y)) changed = true;
        }
      }
      if (v.size() > cap)
        fail("unsupported_mode", kModule,
             "markov closure did not stabilize (non-Markov hole/map)");
      if (!changed) return;
    }
    fail("unsupported_mode", kModule,
         "markov closure did not stabilize within the sweep limit");
  };

  if (markov_mode) {
    for (const Branch& b : sys.map.branches)
      if (!b.affine)
        fail("unsupported_mode", kModule,
             "markov_mode requires affine branches");
    sweep_closure(pts);
  }

  // Merge the uniform k-grid into the forced/closure points.
  std::vector<double> bps = pts;
  for (int i = 1; i < k; ++i)
    insert_point(bps, static_cast<double>(i) / k);
  if (markov_mode) {
    // Grid points may need their images inserted too.
    sweep_closure(bps);
  }

  BinPartition part;
  part.breakpoints = std::move(bps);
  part.markov_aligned = markov_mode;
  return part;
}

//----------------------------------------------------------------------
// DiscretizedOperator
//----------------------------------------------------------------------

double DiscretizedOperator::row_sum(int i) const {
  double s = 0.0;
  for (int k = row_ptr[i]; k < row_ptr[i + 1]; ++k) s += val[k];
  return s;
}

std::vector<double> DiscretizedOperator::apply_mass(
    const std::vector<double>& m) const {
  std::vector<double> out(bins(), 0.0);
  for (int i = 0; i < bins(); ++i) {
    double mi = m[i];
    if (mi == 0.0) continue;
    for (int k = row_ptr[i]; k < row_ptr[i + 1]; ++k)
      out[col[k]] += mi * val[k];
  }
  return out;
}

std::vector<double> DiscretizedOperator::apply_dual(
    const std::vector<double>& g) const {
  std::vector<double> out(bins(), 0.0);
  for (int i = 0; i < bins(); ++i) {
    double acc = 0.0;
    for (int k = row_ptr[i]; k < row_ptr[i + 1]; ++k)
      acc += val[k] * g[col[k]];
    out[i] = acc;
  }
  return out;
}

namespace {

// Walk the image of one monotone piece and report, for each partition
// bin j met, the x-measure of the sub-piece mapping into bin j.
template <typename Sink>
void image_walk(const Branch& b, Interval piece, const BinPartition& part,
                Sink&& sink) {
  if (piece.empty()) return;
  if (b.affine) {
    Interval im = b.image_of(piece);
    double s = std::abs(b.slope);
    int j = part.locate(im.lo);
    while (j < part.bins() && part.breakpoints[j] < im.hi) {
      double lo = std::max(im.lo, part.breakpoints[j]);
      double hi = std::min(im.hi, part.breakpoints[j + 1]);
      if (hi > lo) sink(j, (hi - lo) / s);
      ++j;
    }
    return;
  }
  // Non-affine monotone piece: find x-positions of the breakpoint
  // crossings by bisection, then each x-segment maps into one bin.
  double va = b.value(piece.lo);
  double vb = b.value(piece.hi);
  bool inc = vb >= va;
  double ylo = std::min(va, vb), yhi = std::max(va, vb);
  int j0 = part.locate(std::clamp(ylo, 0.0, 1.0));
  std::vector<double> xs;  // x-cut positions, ascending
  std::vector<int> bins_hit;
  xs.push_back(piece.lo);
  int j = j0;
  // Collect crossings in y order, converting to x order.
  std::vector<double> crossings;
  std::vector<int> jseq;
  while (j < part.bins() && part.breakpoints[j] < yhi) {
    jseq.push_back(j);
    double ynext = part.breakpoints[j + 1];
    if (ynext < yhi) crossings.push_back(ynext);
    ++j;
  }
  auto invert = [&](double target) {
    double lo = piece.lo, hi = piece.hi;
    double flo = b.value(lo) - target;
    for (int it = 0; it < 200 && hi - lo > 1e-14; ++it) {
      double mid = 0.5 * (lo + hi);
      double fm = b.value(mid) - target;
      if ((fm <= 0) == (flo <= 0)) {
        lo = mid;
        flo = fm;
      } else {
        hi = mid;
      }
    }
    double x = 0.5 * (lo + hi);
    if (std::abs(b.value(x) - target) > 1e-8)
      fail("discretization_tolerance", kModule,
           "breakpoint inversion missed its target beyond tolerance");
    return x;
  };
  if (inc) {
    for (double y : crossings) xs.push_back(invert(y));
    for (int jj : jseq) bins_hit.push_back(jj);
  } else {
    for (auto it = crossings.rbegin(); it != crossings.rend(); ++it)
      xs.push_back(invert(*it));
    for (auto it = jseq.rbegin(); it != jseq.rend(); ++it)
      bins_hit.push_back(*it);
  }
  xs.push_back(piece.hi);
  for (std::size_t s = 0; s < bins_hit.size(); ++s) {
    double len = xs[s + 1] - xs[s];
    if (len > 0) sink(bins_hit[s], len);
  }
}

}  // namespace

DiscretizedOperator build_operator(const OpenSystem& sys,
                                   const BinPartition& partition,
                                   OperatorVariant variant,
                                   std::optional<Interval> ball) {
  DiscretizedOperator op;
  op.partition = partition;
  op.variant = variant;
  switch (variant) {
    case OperatorVariant::closed:
      op.retained = IntervalSet::unit();
      break;
    case OperatorVariant::open:
      op.retained = sys.x0;
      break;
    case OperatorVariant::target_perturbed: {
      if (!ball.has_value())
        fail("invalid_map", kModule, "target_perturbed variant needs a ball");
      op.retained = sys.x0.intersect(IntervalSet(*ball).complement());
      break;
    }
  }

  int n = partition.bins();
  op.row_ptr.assign(n + 1, 0);
  std::vector<std::vector<std::pair<int, double>>> rows(n);

  for (int i = 0; i < n; ++i) {
    IntervalSet pieces =
        IntervalSet(partition.bin(i)).intersect(op.retained);
    if (pieces.empty()) continue;
    double wi = partition.width(i);
    auto& row = rows[i];
    for (const Interval& comp : pieces.components()) {
      for (const Branch& b : sys.map.branches) {
        double lo = std::max(comp.lo, b.domain.lo);
        double hi = std::min(comp.hi, b.domain.hi);
        if (hi <= lo) continue;
        image_walk(b, Interval{lo, hi}, partition,
                   [&](int j, double xlen) {
                     row.emplace_back(j, xlen / wi);
                   });
      }
    }
    std::sort(row.begin(), row.end());
    // Merge duplicate columns.
    std::vector<std::pair<int, double>> merged;
    for (const auto& e : row) {
      if (!merged.empty() && merged.back().first == e.first)
        merged.back().second += e.second;
      else
        merged.push_back(e);
    }
    row = std::move(merged);
  }

  for (int i = 0; i < n; ++i)
    op.row_ptr[i + 1] = op.row_ptr[i] + static_cast<int>(rows[i].size());
  op.col.reserve(op.row_ptr[n]);
  op.val.reserve(op.row_ptr[n]);
  for (int i = 0; i < n; ++i) {
    for (const auto& e : rows[i]) {
      op.col.push_back(e.first);
      op.val.push_back(e.second);
    }
  }
  return op;
}

//----------------------------------------------------------------------
// leading_eigs
//----------------------------------------------------------------------

namespace {

using cd = std::complex<double>;

// Eigenvalues of a real upper-Hessenberg matrix by the explicitly
// shifted QR algorithm in complex arithmetic (Wilkinson shifts).
std::vector<cd> hessenberg_eigenvalues(const std::vector<double>& hreal,
                                       int n) {
  std::vector<cd> h(hreal.begin(), hreal.end());
  auto H = [&](int i, int j) -> cd& { return h[i * n + j]; };
  std::vector<cd> eig(n);
  int hi = n - 1;
  int guard = 0;
  while (hi >= 0) {
    if (hi == 0) {
      eig[0] = H(0, 0);
      break;
    }
    int lo = hi;
    while (lo > 0) {
      double sub = std::abs(H(lo, lo - 1));
      if (sub <= 4.0e-16 * (std::abs(H(lo - 1, lo - 1)) +
                            std::abs(H(lo, lo))) +
                     1e-300) {
        H(lo, lo - 1) = 0.0;
        break;
      }
      --lo;
    }
    if (lo == hi) {
      eig[hi] = H(hi, hi);
      --hi;
      guard = 0;
      continue;
    }
    if (++guard > 4000)
      fail("convergence_failure", kModule, "small eigensolver stalled");
    cd a = H(hi - 1, hi - 1), b = H(hi - 1, hi);
    cd c = H(hi, hi - 1), d = H(hi, hi);
    cd disc = std::sqrt((a - d) * (a - d) + 4.0 * b * c);
    cd e1 = 0.5 * (a + d + disc), e2 = 0.5 * (a + d - disc);
    cd mu = std::abs(e1 - d) < std::abs(e2 - d) ? e1 : e2;
    if (guard % 40 == 0) mu = d + cd(0.5 * std::abs(H(hi, hi - 1)), 0.0);
    for (int i = lo; i <= hi; ++i) H(i, i) -= mu;
    std::vector<cd> cs(hi - lo), sn(hi - lo);
    for (int i = lo; i < hi; ++i) {
      cd x = H(i, i), y = H(i + 1, i);
      double r = std::hypot(std::abs(x), std::abs(y));
      cd cc(1.0, 0.0), ss(0.0, 0.0);
      if (r > 1e-300) {
        cc = std::conj(x) / r;
        ss = std::conj(y) / r;
      }
      cs[i - lo] = cc;
      sn[i - lo] = ss;
      for (int j = i; j <= hi; ++j) {
        cd t1 = H(i, j), t2 = H(i + 1, j);
        H(i, j) = cc * t1 + ss * t2;
        H(i + 1, j) = -std::conj(ss) * t1 + std::conj(cc) * t2;
      }
    }
    for (int i = lo; i < hi; ++i) {
      cd cc = cs[i - lo], ss = sn[i - lo];
      int rmax = std::min(hi, i + 1);
      for (int r2 = lo; r2 <= rmax; ++r2) {
        cd t1 = H(r2, i), t2 = H(r2, i + 1);
        H(r2, i) = std::conj(cc) * t1 + std::conj(ss) * t2;
        H(r2, i + 1) = -ss * t1 + cc * t2;
      }
    }
    for (int i = lo; i <= hi; ++i) H(i, i) += mu;
  }
  return eig;
}

// Solve (A - shift I) y = b by dense LU with partial pivoting.
std::vector<double> solve_shifted(std::vector<double> a, int m, double shift,
                                  std::vector<double> b) {
  for (int i = 0; i < m; ++i) a[i * m + i] -= shift;
  std::vector<int> piv(m);
  for (int k = 0; k < m; ++k) {
    int p = k;
    for (int i = k + 1; i < m; ++i)
      if (std::abs(a[i * m + k]) > std::abs(a[p * m + k])) p = i;
    piv[k] = p;
    if (p != k)
      for (int j = 0; j < m; ++j) std::swap(a[k * m + j], a[p * m + j]);
    double pk = a[k * m + k];
    if (std::abs(pk) < 1e-300)
      pk = a[k * m + k] = (pk < 0 ? -1e-300 : 1e-300);
    for (int i = k + 1; i < m; ++i) {
      double f = a[i * m + k] / pk;
      a[i * m + k] = f;
      for (int j = k + 1; j < m; ++j) a[i * m + j] -= f * a[k * m + j];
    }
  }
  for (int k = 0; k < m; ++k) {
    if (piv[k] != k) std::swap(b[k], b[piv[k]]);
    for (int i = k + 1; i < m; ++i) b[i] -= a[i * m + k] * b[k];
  }
  for (int k = m - 1; k >= 0; --k) {
    for (int j = k + 1; j < m; ++j) b[k] -= a[k * m + j] * b[j];
    b[k] /= a[k * m + k];
  }
  return b;
}

struct KrylovPair {
  double theta = 0.0;
  std::vector<double> x;
  double lambda2_abs = 0.0;
  bool usable = false;
};

// Dominant Ritz pair of the linear action `apply` from an Arnoldi
// subspace of dimension up to m_max. Handles defective leading
// eigenvalues, where the power method degrades to O(1/t).
KrylovPair krylov_dominant(
    const std::function<std::vector<double>(const std::vector<double>&)>&
        apply,
    const std::vector<double>& seed, int m_max) {
  const int n = static_cast<int>(seed.size());
  const int m_cap = std::min(m_max, n);
  KrylovPair out;
  double nrm = 0.0;
  for (double v : seed) nrm += v * v;
  nrm = std::sqrt(nrm);
  if (!(nrm > 0.0)) return out;

  std::vector<std::vector<double>> V;
  V.reserve(m_cap + 1);
  {
    std::vector<double> v0 = seed;
    for (double& v : v0) v /= nrm;
    V.push_back(std::move(v0));
  }
  std::vector<double> Hm(static_cast<std::size_t>(m_cap + 1) * m_cap, 0.0);
  auto Hat = [&](int i, int j) -> double& {
    return Hm[static_cast<std::size_t>(i) * m_cap + j];
  };
  int m_eff = m_cap;
  for (int j = 0; j < m_cap; ++j) {
    std::vector<double> w = apply(V[j]);
    for (int pass = 0; pass < 2; ++pass) {  // MGS with reorthogonalization
      for (int i = 0; i <= j; ++i) {
        double d = 0.0;
        for (int t = 0; t < n; ++t) d += V[i][t] * w[t];
        Hat(i, j) += d;
        for (int t = 0; t < n; ++t) w[t] -= d * V[i][t];
      }
    }
    double wn = 0.0;
    for (double v : w) wn += v * v;
    wn = std::sqrt(wn);
    Hat(j + 1, j) = wn;
    if (wn <= 1e-13) {  // invariant subspace reached
      m_eff = j + 1;
      break;
    }
    for (double& v : w) v /= wn;
    V.push_back(std::move(w));
  }

  std::vector<double> hs(static_cast<std::size_t>(m_eff) * m_eff);
  for (int i = 0; i < m_eff; ++i)
    for (int j = 0; j < m_eff; ++j) hs[i * m_eff + j] = Hat(i, j);
  std::vector<cd> eig = hessenberg_eigenvalues(hs, m_eff);
  std::sort(eig.begin(), eig.end(),
            [](cd l, cd r) { return std::abs(l) > std::abs(r); });
  int dom = -1;
  for (std::size_t i = 0; i < eig.size(); ++i) {
    if (std::abs(eig[i].imag()) <= 1e-8 * (std::abs(eig[i]) + 1e-300)) {
      dom = static_cast<int>(i);
      break;
    }
  }
  if (dom < 0) return out;
  out.theta = eig[dom].real();
  // The leading eigenvalue of the mass action is real; a strictly
  // larger complex Ritz value means the subspace is not settled yet.
  if (std::abs(eig[0]) > std::abs(out.theta) * (1.0 + 1e-9) + 1e-300)
    return out;
  for (std::size_t i = 0; i < eig.size(); ++i) {
    if (static_cast<int>(i) != dom) {
      out.lambda2_abs = std::abs(eig[i]);
      break;
    }
  }

  // Ritz vector via inverse iteration at a nudged shift.
  std::vector<double> y(m_eff, 1.0 / std::sqrt(static_cast<double>(m_eff)));
  const double shift =
      out.theta == 0.0 ? 1e-30 : out.theta * (1.0 + 3e-14);
  for (int pass = 0; pass < 3; ++pass) {
    y = solve_shifted(hs, m_eff, shift, y);
    double yn = 0.0;
    for (double v : y) yn += v * v;
    yn = std::sqrt(yn);
    if (!(yn > 0.0) || !std::isfinite(yn)) return out;
    for (double& v : y) v /= yn;
  }
  std::vector<double> x(n, 0.0);
  for (int i = 0; i < m_eff; ++i)
    for (int t = 0; t < n; ++t) x[t] += y[i] * V[i][t];
  double ssum = 0.0;
  for (double v : x) ssum += v;
  if (ssum < 0.0)
    for (double& v : x) v = -v;
  out.x = std::move(x);
  out.usable = true;
  return out;
}

}  // namespace

EigPair leading_eigs(const DiscretizedOperator& op, double tol, int max_iter,
                     bool want_lambda2) {
  int n = op.bins();
  bool any_positive = false;
  for (double v : op.val)
    if (v > 0) any_positive = true;
  if (!any_positive)
    fail("convergence_failure", kModule,
         "operator has no positive entries");

  EigPair out;

  // Left vector (mass direction), normalized to total mass 1.
  std::vector<double> u(n, 0.0);
  for (int i = 0; i < n; ++i)
    if (op.row_ptr[i + 1] > op.row_ptr[i]) u[i] = op.partition.width(i);
  double s0 = 0.0;
  for (double x : u) s0 += x;
  for (double& x : u) x /= s0;

  double lambda = 0.0;
  double residual = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < max_iter; ++it) {
    std::vector<double> next = op.apply_mass(u);
    double lam = 0.0;
    for (double x : next) lam += x;
    if (lam <= 0.0)
      fail("convergence_failure", kModule,
           "mass iteration collapsed to zero");
    residual = 0.0;
    for (int i = 0; i < n; ++i) residual += std::abs(next[i] - lam * u[i]);
    residual /= lam;
    for (double& x : next) x /= lam;
    u = std::move(next);
    lambda = lam;
    if (residual <= tol) break;
  }
  bool via_krylov = false;
  double krylov_l2 = 0.0;
  if (residual > tol) {
    // A defective leading eigenvalue (transient bins feeding the
    // support at rate lambda1 exactly) stalls the power method at
    // O(1/t); a small Krylov subspace resolves the Jordan structure.
    auto apply_l = [&op](const std::vector<double>& v) {
      return op.apply_mass(v);
    };
    std::vector<double> seed = u;
    for (int round = 0; round < 8 && residual > tol; ++round) {
      KrylovPair kp = krylov_dominant(apply_l, seed, 48);
      if (!kp.usable || !(kp.theta > 0.0)) break;
      std::vector<double> img = op.apply_mass(kp.x);
      double res = 0.0;
      for (int i = 0; i < n; ++i)
        res += std::abs(img[i] - kp.theta * kp.x[i]);
      res /= kp.theta;
      if (res <= tol) {
        double ssum = 0.0;
        for (double v : kp.x) ssum += v;
        for (double& v : kp.x) v /= ssum;
        for (double& v : kp.x)  // roundoff-level signs only
          if (v < 0.0 && v > -1e-12) v = 0.0;
        u = std::move(kp.x);
        lambda = kp.theta;
        residual = res;
        krylov_l2 = kp.lambda2_abs;
        via_krylov = true;
      } else {
        seed = std::move(kp.x);
      }
    }
  }
  if (residual > tol)
    fail("convergence_failure", kModule,
         "power iteration did not converge: last residual " +
             std::to_string(residual));

  // Right vector (test-function direction), sup-normalized.
  std::vector<double> g(n, 1.0);
  double gres = std::numeric_limits<double>::infinity();
  for (int jt = 0; jt < max_iter; ++jt) {
    std::vector<double> next = op.apply_dual(g);
    double sup = 0.0;
    for (double x : next) sup = std::max(sup, std::abs(x));
    if (sup <= 0.0)
      fail("convergence_failure", kModule,
           "dual iteration collapsed to zero");
    for (double& x : next) x /= sup;
    gres = 0.0;
    // Residual against the converged lambda: ||M g - lambda g||_inf.
    for (int i = 0; i < n; ++i)
      gres = std::max(gres, std::abs(next[i] * sup - lambda * g[i]));
    gres /= lambda;
    g = std::move(next);
    if (gres <= tol * 10) break;
  }
  if (gres > tol * 10) {
    auto apply_r = [&op](const std::vector<double>& v) {
      return op.apply_dual(v);
    };
    std::vector<double> seed = g;
    for (int round = 0; round < 8 && gres > tol * 10; ++round) {
      KrylovPair kp = krylov_dominant(apply_r, seed, 48);
      if (!kp.usable) break;
      if (std::abs(kp.theta - lambda) > 1e-8 * std::max(1.0, lambda)) {
        seed = std::move(kp.x);
        continue;
      }
      double bigabs = -1.0, big = 0.0, sup = 0.0;
      for (double v : kp.x) {
        if (std::abs(v) > bigabs) {
          bigabs = std::abs(v);
          big = v;
        }
        sup = std::max(sup, std::abs(v));
      }
      if (!(sup > 0.0)) break;
      std::vector<double> cand = kp.x;
      if (big < 0.0)
        for (double& v : cand) v = -v;
      for (double& v : cand) v /= sup;
      std::vector<double> img = op.apply_dual(cand);
      double res = 0.0;
      for (int i = 0; i < n; ++i)
        res = std::max(res, std::abs(img[i] - lambda * cand[i]));
      res /= lambda;
      if (res <= tol * 10) {
        g = std::move(cand);
        gres = res;
      } else {
        seed = std::move(kp.x);
      }
    }
  }
  if (gres > tol * 10)
    fail("convergence_failure", kModule,
         "dual power iteration did not converge: last residual " +
             std::to_string(gres));

  out.lambda1 = lambda;
  out.left = u;
  out.right = g;
  out.iterations = it + 1;
  out.residual = residual;

  if (want_lambda2) {
    if (via_krylov) {
      // Deflation below needs u.g != 0, which fails exactly in the
      // defective case; the Ritz spectrum already carries lambda2.
      out.lambda2_abs = krylov_l2;
      return out;
    }
    double ug = 0.0;
    for (int i = 0; i < n; ++i) ug += u[i] * g[i];
    auto project = [&](std::vector<double>& w) {
      double wg = 0.0;
      for (int i = 0; i < n; ++i) wg += w[i] * g[i];
      double c = wg / ug;
      for (int i = 0; i < n; ++i) w[i] -= c * u[i];
    };
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) {
      double mid = 0.5 * (op.partition.breakpoints[i] +
                          op.partition.breakpoints[i + 1]);
      w[i] = u[i] * (mid - 0.5) + (i % 2 ? 1.0 : -1.0) * 1e-3 *
                 op.partition.width(i);
    }
    project(w);
    double norm = 0.0;
    for (double x : w) norm += std::abs(x);
    if (norm < 1e-300) {
      out.lambda2_abs = 0.0;
      return out;
    }
    for (double& x : w) x /= norm;
    double prev = 0.0, prev2 = 0.0, est = 0.0;
    const double l2tol = std::max(tol, 1e-10);
    bool ok = false;
    for (int jt = 0; jt < max_iter; ++jt) {
      std::vector<double> next = op.apply_mass(w);
      project(next);
      double s = 0.0;
      for (double x : next) s += std::abs(x);
      if (s < 1e-300) {
        est = 0.0;
        ok = true;
        break;
      }
      for (double& x : next) x /= s;
      w = std::move(next);
      // Complex second pairs make the one-step ratio oscillate; the
      // two-step geometric mean settles either way.
      est = std::sqrt(s * prev);
      if (jt > 4 && std::abs(est - std::sqrt(prev * prev2)) <=
                        l2tol * std::max(est, 1e-30)) {
        ok = true;
        break;
      }
      prev2 = prev;
      prev = s;
    }
    if (!ok)
      fail("convergence_failure", kModule,
           "second-eigenvalue iteration did not converge");
    out.lambda2_abs = est;
  }
  return out;
}

//----------------------------------------------------------------------
// spectral_solution and measures
//----------------------------------------------------------------------

namespace {

// Length of S ∩ bin_i for every bin, in one sweep.
std::vector<double> overlap_lengths(const BinPartition& part,
                                    const IntervalSet& s) {
  std::vector<double> ov(part.bins(), 0.0);
  for (const Interval& comp : s.components()) {
    int j = part.locate(comp.lo);
    while (j < part.bins() && part.breakpoints[j] < comp.hi) {
      double lo = std::max(comp.lo, part.breakpoints[j]);
      double hi = std::min(comp.hi, part.breakpoints[j + 1]);
      if (hi > lo) ov[j] += hi - lo;
      ++j;
    }
  }
  return ov;
}

}  // namespace

SpectralSolution spectral_solution(const OpenSystem& sys,
                                   const BinPartition& partition) {
  DiscretizedOperator op =
      build_operator(sys, partition, OperatorVariant::open);
  EigPair eig = leading_eigs(op, 5e-13, 200000, true);
  int n = partition.bins();

  SpectralSolution sol;
  sol.partition = partition;
  sol.alpha = eig.lambda1;

  // h0 normalized by its integral over X0.
  std::vector<double> x0_overlap = overlap_lengths(partition, sys.x0);
  double c = 0.0;
  for (int i = 0; i < n; ++i)
    c += eig.left[i] / partition.width(i) * x0_overlap[i];
  sol.h0.resize(n);
  for (int i = 0; i < n; ++i)
    sol.h0[i] = eig.left[i] / partition.width(i) / c;

  double zg = 0.0;
  for (int i = 0; i < n; ++i) zg += eig.right[i] * partition.width(i);
  sol.mu0.resize(n);
  for (int i = 0; i < n; ++i)
    sol.mu0[i] = eig.right[i] * partition.width(i) / zg;
  sol.dual = eig.right;

  sol.lambda_weights.resize(n);
  double zl = 0.0;
  for (int i = 0; i < n; ++i) {
    sol.lambda_weights[i] = sol.h0[i] * sol.mu0[i];
    zl += sol.lambda_weights[i];
  }
  if (zl > 0.0) {
    for (int i = 0; i < n; ++i) sol.lambda_weights[i] /= zl;
  } else {
    // h0 and mu0 have disjoint support (defective leading eigenvalue);
    // there is no absolutely continuous Lambda on this discretization.
    std::fill(sol.lambda_weights.begin(), sol.lambda_weights.end(), 0.0);
  }

  sol.gap = sol.alpha - eig.lambda2_abs;
  sol.h_minus = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    if (sol.lambda_weights[i] > 1e-12)
      sol.h_minus = std::min(sol.h_minus, sol.h0[i]);
  if (!std::isfinite(sol.h_minus)) sol.h_minus = 0.0;
  return sol;
}

double nu_measure(const OpenSystem& sys, const SpectralSolution& sol,
                  const IntervalSet& s) {
  std::vector<double> ov =
      overlap_lengths(sol.partition, s.intersect(sys.x0));
  double total = 0.0;
  for (int i = 0; i < sol.partition.bins(); ++i) total += sol.h0[i] * ov[i];
  return total;
}

namespace {

struct ConformalContext {
  const OpenSystem& sys;
  const SpectralSolution& sol;
  long long budget = 4'000'000;

  // mu0 measure of [lo,hi), decomposed into whole bins plus sub-bin
  // edges pulled forward through the conformal relation.
  double measure(double lo, double hi, int depth) {
    if (hi <= lo) return 0.0;
    if (--budget < 0) depth = 0;
    const BinPartition& part = sol.partition;
    int i0 = part.locate(lo);
    int i1 = part.locate(std::nextafter(hi, lo));
    if (i0 == i1) return sub_bin(i0, lo, hi, depth);
    double total = 0.0;
    // Left edge.
    if (lo > part.breakpoints[i0])
      total += sub_bin(i0, lo, part.breakpoints[i0 + 1], depth);
    else
      total += sol.mu0[i0];
    for (int i = i0 + 1; i < i1; ++i) total += sol.mu0[i];
    // Right edge.
    if (hi < part.breakpoints[i1 + 1])
      total += sub_bin(i1, part.breakpoints[i1], hi, depth);
    else
      total += sol.mu0[i1];
    return total;
  }

  double sub_bin(int i, double lo, double hi, int depth) {
    if (hi <= lo) return 0.0;
    const BinPartition& part = sol.partition;
    if (lo == part.breakpoints[i] && hi == part.breakpoints[i + 1])
      return sol.mu0[i];
    if (sol.mu0[i] <= 1e-300) return 0.0;
    double frac = (hi - lo) / part.width(i);
    if (depth <= 0) return sol.mu0[i] * frac;
    // Partition breakpoints include branch boundaries, so the piece
    // sits inside one branch.
    double mid = 0.5 * (lo + hi);
    for (const Branch& b : sys.map.branches) {
      if (!b.domain.contains(mid)) continue;
      if (!b.affine) return sol.mu0[i] * frac;  // fallback
      Interval im = b.image_of(Interval{lo, hi});
      return measure(im.lo, im.hi, depth - 1) /
             (sol.alpha * std::abs(b.slope));
    }
    return sol.mu0[i] * frac;
  }
};

}  // namespace

double mu0_measure(const OpenSystem& sys, const SpectralSolution& sol,
                   const IntervalSet& s, int depth) {
  ConformalContext ctx{sys, sol};
  double total = 0.0;
  for (const Interval& iv : s.components())
    total += ctx.measure(iv.lo, iv.hi, depth);
  return total;
}

double lambda_measure(const OpenSystem& sys, const SpectralSolution& sol,
                      const IntervalSet& s, int depth) {
  const BinPartition& part = sol.partition;
  ConformalContext ctx{sys, sol};
  double total = 0.0;
  for (const Interval& comp : s.components()) {
    int j = part.locate(comp.lo);
    while (j < part.bins() && part.breakpoints[j] < comp.hi) {
      double lo = std::max(comp.lo, part.breakpoints[j]);
      double hi = std::min(comp.hi, part.breakpoints[j + 1]);
      if (hi > lo) total += sol.h0[j] * ctx.measure(lo, hi, depth);
      ++j;
    }
  }
  double z = 0.0;
  for (int i = 0; i < part.bins(); ++i) z += sol.h0[i] * sol.mu0[i];
  return total / z;
}

double lambda_measure_interp(const SpectralSolution& sol,
                             const IntervalSet& s) {
  std::vector<double> ov = overlap_lengths(sol.partition, s);
  double total = 0.0;
  for (int i = 0; i < sol.partition.bins(); ++i)
    if (ov[i] > 0)
      total += sol.lambda_weights[i] * ov[i] / sol.partition.width(i);
  return total;
}

//----------------------------------------------------------------------
// Checks
//----------------------------------------------------------------------

double check_operator_closeness(const OpenSystem& sys,
                                const BinPartition& partition) {
  DiscretizedOperator closed =
      build_operator(sys, partition, OperatorVariant::closed);
  DiscretizedOperator open =
      build_operator(sys, partition, OperatorVariant::open);
  int n = partition.bins();
  double worst = 0.0;
  for (int gen = 0; gen <= 10; ++gen) {
    int cells = 1 << gen;
    for (int a = 0; a < cells; ++a) {
      Interval iv{static_cast<double>(a) / cells,
                  static_cast<double>(a + 1) / cells};
      // Indicator of iv has variation norm <= 3 on [0,1]; rescale to 1.
      std::vector<double> mass =
          overlap_lengths(partition, IntervalSet(iv));
      for (double& x : mass) x /= 3.0;
      std::vector<double> lhs = closed.apply_mass(mass);
      std::vector<double> rhs = open.apply_mass(mass);
      double dist = 0.0;
      for (int i = 0; i < n; ++i) dist += std::abs(lhs[i] - rhs[i]);
      worst = std::max(worst, dist);
    }
  }
  return worst;
}

bool check_hole_smallness(const SpectralSolution& sol, double beta,
                          double d_const) {
  return sol.alpha > d_const / beta;
}

double duality_residual(const OpenSystem& sys, const SpectralSolution& sol,
                        const std::vector<double>& v,
                        const std::vector<double>& w) {
  const BinPartition& part = sol.partition;
  int n = part.bins();
  DiscretizedOperator open =
      build_operator(sys, part, OperatorVariant::open);

  // LHS: ∫ (L0 v) w dmu0 with mu0 density g/Z per bin.
  std::vector<double> mass(n);
  for (int i = 0; i < n; ++i) mass[i] = v[i] * part.width(i);
  std::vector<double> pushed = open.apply_mass(mass);
  double lhs = 0.0;
  for (int j = 0; j < n; ++j)
    lhs += pushed[j] / part.width(j) * w[j] * sol.mu0[j];

  // RHS: alpha ∫ v (w∘T) dmu0, resolving preimage pieces conformally.
  ConformalContext ctx{sys, sol};
  double rhs = 0.0;
  for (int i = 0; i < n; ++i) {
    if (v[i] == 0.0) continue;
    IntervalSet pieces = IntervalSet(part.bin(i)).intersect(sys.x0);
    for (const Interval& comp : pieces.components()) {
      for (const Branch& b : sys.map.branches) {
        double lo = std::max(comp.lo, b.domain.lo);
        double hi = std::min(comp.hi, b.domain.hi);
        if (hi <= lo) continue;
        // Sub-piece of bin i mapping into bin j: its mu0 mass is the
        // image's mu0 mass divided by alpha|T'|.
        Interval im = b.image_of(Interval{lo, hi});
        double deriv = std::abs(b.affine ? b.slope
                                         : b.deriv(0.5 * (lo + hi)));
        int j = part.locate(im.lo);
        while (j < part.bins() && part.breakpoints[j] < im.hi) {
          double ylo = std::max(im.lo, part.breakpoints[j]);
          double yhi = std::min(im.hi, part.breakpoints[j + 1]);
          if (yhi > ylo)
            rhs += v[i] * w[j] * ctx.measure(ylo, yhi, 48) /
                   (sol.alpha * deriv);
          ++j;
        }
      }
    }
  }
  rhs *= sol.alpha;
  return std::abs(lhs - rhs);
}

double conformality_residual(const OpenSystem& sys,
                             const SpectralSolution& sol) {
  const BinPartition& part = sol.partition;
  double worst = 0.0;
  for (int i = 0; i < part.bins(); ++i) {
    Interval bin = part.bin(i);
    // Only bins inside the retained region: mu0 is supported on the
    // survivor set, and the conformal relation is a statement about
    // the open system there.
    if (sys.x0.intersect(IntervalSet(bin)).measure() < bin.length() - 1e-12)
      continue;
    double mid = 0.5 * (bin.lo + bin.hi);
    for (const Branch& b : sys.map.branches) {
      if (!b.domain.contains(mid)) continue;
      double lo = std::max(bin.lo, b.domain.lo);
      double hi = std::min(bin.hi, b.domain.hi);
      if (hi - lo < bin.length() - 1e-12) continue;  // straddles branches
      Interval im = b.image_of(Interval{lo, hi});
      double lhs = mu0_measure(sys, sol, IntervalSet(im));
      double deriv = std::abs(b.affine ? b.slope : b.deriv(mid));
      double rhs = sol.alpha * deriv * sol.mu0[i];
      worst = std::max(worst, std::abs(lhs - rhs));
    }
  }
  return worst;
}

double lambda_invariance_residual(const OpenSystem& sys,
                                  const SpectralSolution& sol,
                                  const IntervalSet& a) {
  double direct = lambda_measure(sys, sol, a);
  IntervalSet pre = preimage_set(sys.map, a);
  double pulled = lambda_measure(sys, sol, pre);
  return std::abs(direct - pulled);
}

//----------------------------------------------------------------------
// Perturbed-operator curves
//----------------------------------------------------------------------

std::vector<double> evd_operator_curve(const OpenSystem& sys,
                                       const SpectralSolution& sol,
                                       const BinPartition& partition,
                                       double z,
                                       const std::vector<int>& n_values,
                                       const std::vector<double>& u_values) {
  if (n_values.size() != u_values.size())
    fail("invalid_map", kModule, "n_values and u_values differ in length");
  DiscretizedOperator open =
      build_operator(sys, partition, OperatorVariant::open);
  int nb = partition.bins();

  std::vector<double> x0_overlap = overlap_lengths(partition, sys.x0);
  std::vector<double> h0_mass(nb);
  for (int i = 0; i < nb; ++i) h0_mass[i] = sol.h0[i] * x0_overlap[i];

  std::vector<double> out;
  out.reserve(n_values.size());
  for (std::size_t t = 0; t < n_values.size(); ++t) {
    int n = n_values[t];
    if (n < 1) fail("invalid_map", kModule, "curve levels need n >= 1");
    double r = std::exp(-u_values[t]);
    Interval ball{z - r, z + r};
    std::vector<double> frac =
        overlap_lengths(partition, IntervalSet(ball));
    for (int i = 0; i < nb; ++i)
      frac[i] = 1.0 - frac[i] / partition.width(i);

    // alpha^{-(n-1)} * sum((h0 M~^n)) with per-step alpha rescaling.
    std::vector<double> v = h0_mass;
    for (int step = 0; step < n; ++step) {
      for (int i = 0; i < nb; ++i) v[i] *= frac[i];
      v = open.apply_mass(v);
      for (int i = 0; i < nb; ++i) v[i] /= sol.alpha;
    }
    double total = 0.0;
    for (double x : v) total += x;
    out.push_back(sol.alpha * total);
  }
  return out;
}

PerturbedSpectrum perturbed_eigenvalue_curve(
    const OpenSystem& sys, const SpectralSolution& sol,
    const BinPartition& partition, double z,
    const std::vector<double>& radii) {
  TargetSpec spec = classify_target(sys, z);
  PerturbedSpectrum out;
  out.radii = radii;
  for (double r : radii) {
    if (r <= 0) fail("invalid_map", kModule, "radii must be positive");
    Interval ball{z - r, z + r};
    double lam_mass = lambda_measure_interp(sol, IntervalSet(ball));
    if (lam_mass <= 0.0 && spec.cls != TargetClass::off_survivor)
      fail("inconsistent_classification", kModule,
           "ball carries no lambda mass although the target is on the "
           "survivor set");
    DiscretizedOperator pert = build_operator(
        sys, partition, OperatorVariant::target_perturbed, ball);
    EigPair eig = leading_eigs(pert, 5e-13, 200000, false);
    double delta = sol.alpha * lam_mass;
    out.lambda_n.push_back(eig.lambda1);
    out.delta_n.push_back(delta);
    out.slope_estimates.push_back(
        delta > 0 ? (sol.alpha - eig.lambda1) / delta : 0.0);
  }
  return out;
}

}  // namespace openevt
