#pragma once

/** Independent verification machinery: finite-difference derivatives through
 * retractions, the Riccati LQR reference solution, brute-force feasible-set
 * distances, and direction-sampled lower Dini derivatives.
 *
 * Everything here is deliberately kept independent of the solver and adjoint
 * code paths it is used to check.
 */

#include <dgmp/manifold.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <variant>
#include <vector>

namespace dgmp::oracle {

// --------------------------------------------------------------------------
// Finite differences

struct FdGradient {
  VectorXd grad;            // Richardson-extrapolated central differences
  VectorXd grad_coarse;     // plain central differences at the base step
  double error_estimate;    // |extrapolated - fine| style bound
  double richardson_ratio;  // should be near 4 for a second-order method
};

/// Central differences of a scalar function along retractions of the
/// coordinate basis tangents, with Richardson extrapolation.
inline FdGradient fd_gradient(const std::function<double(const Point&)>& f, const Point& x,
                              double step = 1e-6) {
  const int d = x.manifold().dim();
  auto central = [&](double h) {
    VectorXd g(d);
    for (int k = 0; k < d; ++k) {
      VectorXd e = VectorXd::Zero(d);
      e[k] = h;
      const double fp = f(retract(x, e));
      const double fm = f(retract(x, VectorXd(-e)));
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("fd_gradient: non-finite function value");
      }
      g[k] = (fp - fm) / (2.0 * h);
    }
    return g;
  };
  const VectorXd g2 = central(2.0 * step);
  const VectorXd g1 = central(step);
  const VectorXd g_half = central(0.5 * step);
  FdGradient out;
  out.grad = (4.0 * g_half - g1) / 3.0;
  out.grad_coarse = g1;
  out.error_estimate = (g_half - g1).norm() / 3.0;
  const double denom = (g_half - g1).norm();
  out.richardson_ratio = denom > 0.0 ? (g1 - g2).norm() / denom : 0.0;
  return out;
}

// --------------------------------------------------------------------------
// Riccati reference for discrete LQR

/// Minimizes 1/2 sum (q^T Qc q + u^T Rc u) + 1/2 q_n^T Qf q_n for
/// q_{i+1} = A q_i + B u_i by the backward Riccati recursion.
struct RiccatiSolution {
  std::vector<VectorXd> controls;
  std::vector<VectorXd> states;
  std::vector<MatrixXd> gains;       // u_i = -K_i q_i
  std::vector<MatrixXd> cost_to_go;  // P_i, i = 0..n
  double value = 0.0;
};

inline RiccatiSolution riccati_lqr(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Qc,
                                   const MatrixXd& Rc, const MatrixXd& Qf, int n,
                                   const VectorXd& q0) {
  const int d = static_cast<int>(A.rows());
  const int m = static_cast<int>(B.cols());
  if (A.cols() != d || B.rows() != d || Qc.rows() != d || Rc.rows() != m || Qf.rows() != d) {
    throw std::invalid_argument("riccati_lqr: dimension mismatch");
  }
  RiccatiSolution sol;
  sol.cost_to_go.assign(n + 1, MatrixXd());
  sol.gains.assign(n, MatrixXd());
  sol.cost_to_go[n] = Qf;
  for (int i = n - 1; i >= 0; --i) {
    const MatrixXd& P = sol.cost_to_go[i + 1];
    const MatrixXd S = Rc + B.transpose() * P * B;
    Eigen::FullPivLU<MatrixXd> lu(S);
    if (!lu.isInvertible()) {
      throw std::runtime_error("riccati_lqr: singular Rc + B^T P B");
    }
    sol.gains[i] = lu.solve(B.transpose() * P * A);
    sol.cost_to_go[i] = Qc + A.transpose() * P * (A - B * sol.gains[i]);
  }
  sol.states.assign(n + 1, VectorXd());
  sol.controls.assign(n, VectorXd());
  sol.states[0] = q0;
  double j = 0.0;
  for (int i = 0; i < n; ++i) {
    sol.controls[i] = -sol.gains[i] * sol.states[i];
    j += 0.5 * sol.states[i].dot(Qc * sol.states[i]) +
         0.5 * sol.controls[i].dot(Rc * sol.controls[i]);
    sol.states[i + 1] = A * sol.states[i] + B * sol.controls[i];
  }
  j += 0.5 * sol.states[n].dot(Qf * sol.states[n]);
  sol.value = j;
  return sol;
}

// --------------------------------------------------------------------------
// Lower Dini derivative estimate

struct DiniEstimate {
  double value;  // min of the forward quotients (liminf surrogate)
  std::vector<double> quotients;
  bool monotone;  // successive quotient gaps shrink
};

inline DiniEstimate dini_estimate(const std::function<double(const Point&)>& f, const Point& x,
                                  const VectorXd& v) {
  static const double lambdas[] = {1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  DiniEstimate est;
  const double f0 = f(x);
  for (double lam : lambdas) {
    const double fl = f(retract(x, VectorXd(lam * v)));
    if (!std::isfinite(fl)) throw std::runtime_error("dini_estimate: non-finite value");
    est.quotients.push_back((fl - f0) / lam);
  }
  // Candidates: extrapolated pairs (cancel the first-order remainder of the
  // forward quotient) plus the finest raw quotient; the min is the liminf
  // surrogate.
  est.value = est.quotients.back();
  for (std::size_t k = 0; k + 1 < est.quotients.size(); ++k) {
    const double extrap = (10.0 * est.quotients[k + 1] - est.quotients[k]) / 9.0;
    est.value = std::min(est.value, extrap);
  }
  est.monotone = true;
  for (std::size_t k = 2; k < est.quotients.size(); ++k) {
    const double prev = std::abs(est.quotients[k - 1] - est.quotients[k - 2]);
    const double cur = std::abs(est.quotients[k] - est.quotients[k - 1]);
    if (cur > prev + 1e-12) est.monotone = false;
  }
  return est;
}

// --------------------------------------------------------------------------
// Distance to feasible sets

struct Halfspace {
  VectorXd normal;
  double offset;  // normal . x <= offset
};
struct BoxRegion {
  VectorXd lo, hi;
};
struct BallRegion {
  VectorXd center;
  double radius;
};
struct PolytopeRegion {
  MatrixXd A;
  VectorXd b;  // A x <= b
};
using ConvexRegion = std::variant<Halfspace, BoxRegion, BallRegion, PolytopeRegion>;

/// Exact Euclidean projection distance onto a convex region. Polytopes are
/// handled by enumerating active sets of the projection QP.
inline double region_distance(const ConvexRegion& region, const VectorXd& x) {
  struct Visitor {
    const VectorXd& x;
    double operator()(const Halfspace& h) const {
      return std::max(0.0, (h.normal.dot(x) - h.offset) / h.normal.norm());
    }
    double operator()(const BoxRegion& b) const {
      double s = 0.0;
      for (int k = 0; k < x.size(); ++k) {
        const double c = std::min(std::max(x[k], b.lo[k]), b.hi[k]);
        s += (x[k] - c) * (x[k] - c);
      }
      return std::sqrt(s);
    }
    double operator()(const BallRegion& b) const {
      return std::max(0.0, (x - b.center).norm() - b.radius);
    }
    double operator()(const PolytopeRegion& p) const {
      const int m = static_cast<int>(p.A.rows());
      if (m > 16) throw std::invalid_argument("region_distance: too many polytope rows");
      if (((p.A * x - p.b).array() <= 1e-14).all()) return 0.0;
      double best = std::numeric_limits<double>::infinity();
      // Enumerate candidate active sets of the projection QP.
      for (std::uint32_t mask = 1; mask < (1u << m); ++mask) {
        std::vector<int> rows;
        for (int r = 0; r < m; ++r) {
          if (mask & (1u << r)) rows.push_back(r);
        }
        if (static_cast<int>(rows.size()) > x.size()) continue;
        MatrixXd As(rows.size(), x.size());
        VectorXd bs(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
          As.row(r) = p.A.row(rows[r]);
          bs[r] = p.b[rows[r]];
        }
        const MatrixXd G = As * As.transpose();
        Eigen::FullPivLU<MatrixXd> lu(G);
        if (!lu.isInvertible()) continue;
        const VectorXd mult = lu.solve(As * x - bs);
        const VectorXd y = x - As.transpose() * mult;
        if (((p.A * y - p.b).array() <= 1e-10).all()) {
          best = std::min(best, (x - y).norm());
        }
      }
      return best;
    }
  };
  return std::visit(Visitor{x}, region);
}

struct DistanceBracket {
  double lower = 0.0;
  double upper = std::numeric_limits<double>::infinity();
  bool exact = false;
};

/// Distance to a union of convex regions: exact, the minimum of the member
/// projections.
inline DistanceBracket feasible_distance(const std::vector<ConvexRegion>& members,
                                         const VectorXd& x) {
  DistanceBracket out;
  if (members.empty()) throw std::invalid_argument("feasible_distance: empty union");
  out.upper = std::numeric_limits<double>::infinity();
  for (const auto& r : members) out.upper = std::min(out.upper, region_distance(r, x));
  out.lower = out.upper;
  out.exact = true;
  return out;
}

/// Grid bracket for a black-box feasibility test over a compact box.
/// `feasible(y)` decides membership (e.g. penalty value below a tolerance).
/// Returns [best - resolution, best] after nested refinement around the best
/// feasible sample; Unknown (empty bracket) is signalled by lower > upper.
inline DistanceBracket feasible_distance(const std::function<bool(const VectorXd&)>& feasible,
                                         const VectorXd& box_lo, const VectorXd& box_hi,
                                         const VectorXd& x, int grid_depth = 3,
                                         int points_per_axis = 9) {
  const int d = static_cast<int>(x.size());
  if (box_lo.size() != d || box_hi.size() != d) {
    throw std::invalid_argument("feasible_distance: box dimension mismatch");
  }
  if (std::pow(double(points_per_axis), d) > 2e6) {
    throw std::invalid_argument("feasible_distance: search box dimension too large");
  }
  VectorXd lo = box_lo, hi = box_hi;
  DistanceBracket out;
  VectorXd best_y;
  for (int depth = 0; depth < grid_depth; ++depth) {
    std::vector<int> idx(d, 0);
    bool done = false;
    double cell = 0.0;
    for (int k = 0; k < d; ++k) {
      cell += std::pow((hi[k] - lo[k]) / (points_per_axis - 1), 2);
    }
    cell = std::sqrt(cell);
    while (!done) {
      VectorXd y(d);
      for (int k = 0; k < d; ++k) {
        y[k] = lo[k] + (hi[k] - lo[k]) * idx[k] / double(points_per_axis - 1);
      }
      if (feasible(y)) {
        const double dist = (y - x).norm();
        if (dist < out.upper) {
          out.upper = dist;
          best_y = y;
        }
      }
      int k = 0;
      while (k < d && ++idx[k] == points_per_axis) {
        idx[k] = 0;
        ++k;
      }
      done = (k == d);
    }
    if (!best_y.size()) break;  // nothing feasible at this resolution
    out.lower = std::max(0.0, out.upper - cell);
    // Refine around the best sample.
    for (int k = 0; k < d; ++k) {
      const double half = (hi[k] - lo[k]) / double(points_per_axis - 1);
      lo[k] = best_y[k] - half;
      hi[k] = best_y[k] + half;
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// Derivative audit registry

/// One entry per analytic derivative shipped with the library; running the
/// check returns the worst relative error against fd_gradient over the
/// entry's own deterministic samples.
struct DerivativeAudit {
  std::string name;
  std::function<double()> max_relative_error;
};

}  // namespace dgmp::oracle
