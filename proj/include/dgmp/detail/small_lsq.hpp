#pragma once

/** Exact solver for small sign-constrained least-squares problems.
 *
 * minimize    ||A z - c||^2
 * subject to  z_k >= 0          for flagged k
 *             E z = d           (a handful of affine rows)
 *
 * Solved by enumerating active sets of the flagged variables and taking the
 * best feasible KKT candidate; the problem is convex, so the enumeration is
 * exhaustive and the returned point is a global minimizer. Sized for
 * certificate assembly (multiplier recovery, hull selections), not for bulk
 * numerical work: the number of flagged variables is capped.
 */

#include <Eigen/Dense>

#include <limits>
#include <stdexcept>
#include <vector>

namespace dgmp::detail {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct LsqProblem {
  MatrixXd A;
  VectorXd c;
  std::vector<bool> nonneg;  // size A.cols(); true = sign-constrained
  MatrixXd E;                // may have zero rows
  VectorXd d;
};

struct LsqSolution {
  VectorXd z;
  double objective = std::numeric_limits<double>::infinity();
  bool feasible = false;
};

inline LsqSolution solve_small_lsq(const LsqProblem& prob) {
  const int n = static_cast<int>(prob.A.cols());
  if (static_cast<int>(prob.nonneg.size()) != n) {
    throw std::invalid_argument("solve_small_lsq: nonneg mask size mismatch");
  }
  const int neq = static_cast<int>(prob.E.rows());
  if (neq > 0 && prob.E.cols() != n) {
    throw std::invalid_argument("solve_small_lsq: equality row width mismatch");
  }

  std::vector<int> flagged;
  for (int k = 0; k < n; ++k) {
    if (prob.nonneg[k]) flagged.push_back(k);
  }
  if (flagged.size() > 16) {
    throw std::invalid_argument("solve_small_lsq: too many sign-constrained variables");
  }

  const double scale = 1.0 + prob.A.norm() + prob.c.norm() + (neq ? prob.E.norm() : 0.0);
  const double eq_tol = 1e-9 * scale;

  LsqSolution best;
  const std::size_t subsets = std::size_t{1} << flagged.size();
  for (std::size_t mask = 0; mask < subsets; ++mask) {
    // Variables pinned to zero for this candidate.
    std::vector<bool> pinned(n, false);
    for (std::size_t j = 0; j < flagged.size(); ++j) {
      if (mask & (std::size_t{1} << j)) pinned[flagged[j]] = true;
    }
    std::vector<int> free_idx;
    for (int k = 0; k < n; ++k) {
      if (!pinned[k]) free_idx.push_back(k);
    }

    const int nf = static_cast<int>(free_idx.size());
    VectorXd z = VectorXd::Zero(n);
    if (nf > 0) {
      MatrixXd Af(prob.A.rows(), nf);
      for (int j = 0; j < nf; ++j) Af.col(j) = prob.A.col(free_idx[j]);
      MatrixXd Ef(neq, nf);
      for (int j = 0; j < nf; ++j) {
        if (neq) Ef.col(j) = prob.E.col(free_idx[j]);
      }

      // KKT system for the equality-constrained subproblem.
      MatrixXd K(nf + neq, nf + neq);
      K.setZero();
      K.topLeftCorner(nf, nf) = 2.0 * Af.transpose() * Af;
      if (neq) {
        K.topRightCorner(nf, neq) = Ef.transpose();
        K.bottomLeftCorner(neq, nf) = Ef;
      }
      VectorXd rhs(nf + neq);
      rhs.head(nf) = 2.0 * Af.transpose() * prob.c;
      if (neq) rhs.tail(neq) = prob.d;

      const VectorXd sol = K.colPivHouseholderQr().solve(rhs);
      if (!sol.allFinite()) continue;
      for (int j = 0; j < nf; ++j) z[free_idx[j]] = sol[j];
    }

    if (neq && (prob.E * z - prob.d).lpNorm<Eigen::Infinity>() > eq_tol) continue;
    bool signs_ok = true;
    for (int k = 0; k < n && signs_ok; ++k) {
      if (prob.nonneg[k] && z[k] < -1e-11 * scale) signs_ok = false;
    }
    if (!signs_ok) continue;
    for (int k = 0; k < n; ++k) {
      if (prob.nonneg[k] && z[k] < 0.0) z[k] = 0.0;
    }

    const double obj = (prob.A * z - prob.c).squaredNorm();
    if (!best.feasible || obj < best.objective) {
      best.z = z;
      best.objective = obj;
      best.feasible = true;
    }
  }
  return best;
}

/// min ||A z|| over the simplex {z >= 0, sum z = 1}; used to decide whether
/// zero lies in the convex hull of the columns of A and to extract a witness.
inline LsqSolution min_norm_in_hull(const MatrixXd& A) {
  LsqProblem p;
  p.A = A;
  p.c = VectorXd::Zero(A.rows());
  p.nonneg.assign(A.cols(), true);
  p.E = MatrixXd::Ones(1, A.cols());
  p.d = VectorXd::Ones(1);
  return solve_small_lsq(p);
}

}  // namespace dgmp::detail
