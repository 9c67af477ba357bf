#pragma once

// Reference implementations used only by the test suite. These are written
// against raw Eigen types and stay independent of the library code paths
// they are used to check.

#include <Eigen/Dense>

#include <random>
#include <vector>

namespace testoracle {

using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

// Truncated power series for the matrix exponential.
inline Matrix3d expm_series(const Matrix3d& A, int terms = 30) {
  Matrix3d sum = Matrix3d::Identity();
  Matrix3d pow = Matrix3d::Identity();
  double fact = 1.0;
  for (int k = 1; k <= terms; ++k) {
    pow = pow * A;
    fact *= k;
    sum += pow / fact;
  }
  return sum;
}

inline Matrix3d skew_of(const Vector3d& a) {
  Matrix3d m;
  m << 0.0, -a.z(), a.y(), a.z(), 0.0, -a.x(), -a.y(), a.x(), 0.0;
  return m;
}

inline Vector3d unskew(const Matrix3d& m) { return Vector3d(m(2, 1), m(0, 2), m(1, 0)); }

// Adjoint action computed through conjugation of skew matrices (independent
// of the library's closed form).
inline Vector3d ad_by_conjugation(const Matrix3d& R, const Vector3d& a) {
  return unskew(Matrix3d(R * skew_of(a) * R.transpose()));
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (rng() >> 11) * 0x1.0p-53;
}

inline VectorXd random_vector(std::mt19937_64& rng, int n, double scale = 1.0) {
  VectorXd v(n);
  for (int k = 0; k < n; ++k) v[k] = uniform(rng, -scale, scale);
  return v;
}

inline MatrixXd random_matrix(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) m(i, j) = uniform(rng, -scale, scale);
  }
  return m;
}

inline Matrix3d random_rotation(std::mt19937_64& rng, double angle_scale = 1.5) {
  return expm_series(skew_of(Vector3d(random_vector(rng, 3, angle_scale))));
}

// Exact min-norm projection of w onto the cone {v : A v <= 0} by active-set
// enumeration of the projection QP.
inline VectorXd cone_project_enumerate(const MatrixXd& A, const VectorXd& w) {
  const int m = static_cast<int>(A.rows());
  const int d = static_cast<int>(w.size());
  VectorXd best;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 0; mask < (1u << m); ++mask) {
    std::vector<int> rows;
    for (int r = 0; r < m; ++r) {
      if (mask & (1u << r)) rows.push_back(r);
    }
    VectorXd y = w;
    if (!rows.empty()) {
      if (static_cast<int>(rows.size()) > d) continue;
      MatrixXd As(rows.size(), d);
      for (std::size_t r = 0; r < rows.size(); ++r) As.row(r) = A.row(rows[r]);
      Eigen::FullPivLU<MatrixXd> lu(As * As.transpose());
      if (!lu.isInvertible()) continue;
      y = w - As.transpose() * lu.solve(As * w);
    }
    if (((A * y).array() <= 1e-10).all()) {
      const double dist = (w - y).norm();
      if (dist < best_dist) {
        best_dist = dist;
        best = y;
      }
    }
  }
  return best;
}

// Dense KKT solve of min 1/2 z^T H z + c^T z subject to E z = d.
struct KktSolution {
  VectorXd z;
  VectorXd multipliers;
};

inline KktSolution solve_equality_qp(const MatrixXd& H, const VectorXd& c, const MatrixXd& E,
                                     const VectorXd& d) {
  const int n = static_cast<int>(H.rows());
  const int m = static_cast<int>(E.rows());
  MatrixXd K(n + m, n + m);
  K.setZero();
  K.topLeftCorner(n, n) = H;
  K.topRightCorner(n, m) = E.transpose();
  K.bottomLeftCorner(m, n) = E;
  VectorXd rhs(n + m);
  rhs.head(n) = -c;
  rhs.tail(m) = d;
  const VectorXd sol = K.fullPivLu().solve(rhs);
  return KktSolution{sol.head(n), sol.tail(m)};
}

}  // namespace testoracle
