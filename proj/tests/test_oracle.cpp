#include <dgmp/detail/small_lsq.hpp>
#include <dgmp/liegroup.hpp>
#include <dgmp/oracle.hpp>
#include <gtest/gtest.h>

#include "support/test_oracles.hpp"

using namespace dgmp;

TEST(FdGradient, QuadraticKineticAndPolynomial) {
  // f = ||x||^2 / 2 on R^3: gradient is x.
  const Manifold R3 = Manifold::euclidean(3);
  const Point x(R3, Eigen::Vector3d(0.3, -1.2, 2.0));
  const auto g = oracle::fd_gradient(
      [](const Point& p) { return 0.5 * p.coords().squaredNorm(); }, x);
  EXPECT_LT((g.grad - x.coords()).norm(), 1e-9);
  EXPECT_LT(g.error_estimate, 1e-8);

  // SO(3) kinetic at the identity: dK(e) = 0.
  const Matrix3d J_d = Vector3d(1, 2, 3).asDiagonal();
  const double h = 0.05;
  const auto k = oracle::fd_gradient(
      [&](const Point& u) { return ((Matrix3d::Identity() - u.rotation()) * J_d).trace() / h; },
      identity_point(Manifold::so3()));
  EXPECT_LT(k.grad.norm(), 1e-8);

  // Random polynomial with a hand-written gradient.
  std::mt19937_64 rng(3);
  const VectorXd c = testoracle::random_vector(rng, 3);
  auto f = [c](const Point& p) {
    const VectorXd& v = p.coords();
    return c[0] * v[0] * v[0] * v[0] + c[1] * v[2] * v[1] + c[2] * v[0];
  };
  const Point y(R3, testoracle::random_vector(rng, 3));
  Eigen::Vector3d grad_hand(3 * c[0] * y.coords()[0] * y.coords()[0] + c[2],
                            c[1] * y.coords()[2], c[1] * y.coords()[1]);
  const auto gp = oracle::fd_gradient(f, y);
  EXPECT_LT((gp.grad - grad_hand).norm(), 1e-7);
  // Ratio diagnostic needs a coarse enough step for the h^2 remainder to
  // stand above rounding noise.
  EXPECT_NEAR(oracle::fd_gradient(f, y, 1e-3).richardson_ratio, 4.0, 0.5);

  // Non-finite values are an error.
  EXPECT_THROW(oracle::fd_gradient([](const Point&) { return std::nan(""); }, y),
               std::runtime_error);
}

TEST(RiccatiLqr, DegenerateAndScalarCases) {
  // B = 0: no influence, zero controls.
  const MatrixXd A = 0.5 * MatrixXd::Identity(2, 2);
  const MatrixXd B = MatrixXd::Zero(2, 1);
  const auto sol = oracle::riccati_lqr(A, B, MatrixXd::Identity(2, 2),
                                       MatrixXd::Identity(1, 1), MatrixXd::Identity(2, 2), 4,
                                       Eigen::Vector2d(1, -1));
  for (const auto& u : sol.controls) EXPECT_DOUBLE_EQ(u.norm(), 0.0);

  // n = 1 scalar: u* = -(B P A / (R + B^2 P)) q0 with P = Qf.
  const double a = 1.3, b = 0.7, r = 2.0, qf = 3.0, q0 = 0.9;
  const auto s1 = oracle::riccati_lqr(MatrixXd::Constant(1, 1, a), MatrixXd::Constant(1, 1, b),
                                      MatrixXd::Zero(1, 1), MatrixXd::Constant(1, 1, r),
                                      MatrixXd::Constant(1, 1, qf), 1,
                                      VectorXd::Constant(1, q0));
  EXPECT_NEAR(s1.controls[0][0], -(b * qf * a / (r + b * b * qf)) * q0, 1e-14);
}

TEST(RiccatiLqr, ValueMatchesDenseQpSolve) {
  std::mt19937_64 rng(5);
  const int d = 2, m = 1, n = 3;
  const MatrixXd A = testoracle::random_matrix(rng, d, d);
  const MatrixXd B = testoracle::random_matrix(rng, d, m);
  const MatrixXd Qc = MatrixXd::Identity(d, d), Rc = MatrixXd::Identity(m, m),
                 Qf = 2.0 * MatrixXd::Identity(d, d);
  const VectorXd q0 = testoracle::random_vector(rng, d);
  const auto ric = oracle::riccati_lqr(A, B, Qc, Rc, Qf, n, q0);

  // Dense normal equations over the stacked controls.
  MatrixXd Gamma = MatrixXd::Zero(d * n, m * n);
  MatrixXd Phi(d * n, d);
  MatrixXd Ak = MatrixXd::Identity(d, d);
  for (int i = 0; i < n; ++i) {
    Ak = A * Ak;
    Phi.middleRows(i * d, d) = Ak;
    for (int j = 0; j <= i; ++j) {
      MatrixXd blk = B;
      for (int k = j + 1; k <= i; ++k) blk = A * blk;
      Gamma.block(i * d, j * m, d, m) = blk;
    }
  }
  MatrixXd H = MatrixXd::Zero(m * n, m * n);
  VectorXd g = VectorXd::Zero(m * n);
  double c0 = 0.5 * q0.dot(Qc * q0);
  for (int i = 0; i < n; ++i) {
    const MatrixXd W = (i + 1 < n) ? Qc : Qf;
    const MatrixXd Gi = Gamma.middleRows(i * d, d);
    const VectorXd base = Phi.middleRows(i * d, d) * q0;
    H += Gi.transpose() * W * Gi;
    g += Gi.transpose() * W * base;
    c0 += 0.5 * base.dot(W * base);
    H.block(i * m, i * m, m, m) += Rc;
  }
  const VectorXd u_qp = H.ldlt().solve(-g);
  const double value_qp = 0.5 * u_qp.dot(H * u_qp) + g.dot(u_qp) + c0;
  EXPECT_NEAR(ric.value, value_qp, 1e-10);
  for (int i = 0; i < n; ++i) {
    EXPECT_LT((ric.controls[i] - u_qp.segment(i * m, m)).norm(), 1e-10);
  }

  // Singular R + B^T P B is reported.
  EXPECT_THROW(oracle::riccati_lqr(A, MatrixXd::Zero(d, m), Qc, MatrixXd::Zero(m, m), Qf, 2, q0),
               std::runtime_error);
}

TEST(FeasibleDistance, ClosedFormRegions) {
  // Halfspace: positive part of the violation over the normal length.
  oracle::Halfspace hs{Eigen::Vector2d(3, 4), 1.0};
  EXPECT_DOUBLE_EQ(oracle::region_distance(hs, Eigen::Vector2d(0, 0)), 0.0);
  EXPECT_NEAR(oracle::region_distance(hs, Eigen::Vector2d(1, 1)), (3 + 4 - 1) / 5.0, 1e-14);

  // Box: clamp distance.
  oracle::BoxRegion box{Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 1)};
  EXPECT_NEAR(oracle::region_distance(box, Eigen::Vector2d(2, 3)), std::hypot(1.0, 2.0), 1e-14);

  // Union of two discs: the bracket contains the analytic minimum.
  std::vector<oracle::ConvexRegion> discs = {
      oracle::BallRegion{Eigen::Vector2d(-2, 0), 1.0},
      oracle::BallRegion{Eigen::Vector2d(3, 0), 0.5},
  };
  const auto bracket = oracle::feasible_distance(discs, Eigen::Vector2d(1, 0));
  const double truth = std::min((Eigen::Vector2d(1, 0) - Eigen::Vector2d(-2, 0)).norm() - 1.0,
                                (Eigen::Vector2d(1, 0) - Eigen::Vector2d(3, 0)).norm() - 0.5);
  EXPECT_TRUE(bracket.exact);
  EXPECT_NEAR(bracket.upper, truth, 1e-14);
}

TEST(FeasibleDistance, PolytopeProjectionByEnumeration) {
  std::mt19937_64 rng(7);
  MatrixXd A(3, 2);
  A << -1, 0, 0, -1, 1, 1;
  VectorXd b(3);
  b << 0, 0, 1;
  oracle::PolytopeRegion tri{A, b};
  for (int k = 0; k < 100; ++k) {
    const VectorXd x = testoracle::random_vector(rng, 2, 2.0);
    const double d_poly = oracle::region_distance(tri, x);
    // Cross-check against dense sampling of the triangle.
    double best = std::numeric_limits<double>::infinity();
    for (double s = 0; s <= 1.0 + 1e-12; s += 0.002) {
      for (double t = 0; s + t <= 1.0 + 1e-12; t += 0.002) {
        best = std::min(best, (x - Eigen::Vector2d(s, t)).norm());
      }
    }
    EXPECT_NEAR(d_poly, best, 3e-3);
    EXPECT_LE(d_poly, best + 1e-12);  // enumeration is exact, sampling is not
  }
}

TEST(FeasibleDistance, GridBracketForBlackBoxSets) {
  // Feasibility = unit disc; query outside.
  auto feasible = [](const VectorXd& y) { return y.norm() <= 1.0; };
  const VectorXd x = Eigen::Vector2d(2.0, 0.0);
  const auto bracket =
      oracle::feasible_distance(feasible, Eigen::Vector2d(-1.5, -1.5), Eigen::Vector2d(1.5, 1.5),
                                x, 4, 13);
  EXPECT_FALSE(bracket.exact);
  EXPECT_LE(bracket.lower, 1.0);
  EXPECT_GE(bracket.upper, 1.0 - 1e-9);
  EXPECT_LT(bracket.upper - 1.0, 0.05);
}

TEST(DiniEstimate, SmoothKinkAndTiedMax) {
  const Manifold R1 = Manifold::euclidean(1);

  // Smooth function: matches the pairing with the differential.
  const Point x(R1, VectorXd::Constant(1, 0.7));
  const auto smooth = oracle::dini_estimate(
      [](const Point& p) { return std::sin(p.coords()[0]); }, x, VectorXd::Constant(1, 2.0));
  EXPECT_NEAR(smooth.value, 2.0 * std::cos(0.7), 1e-5);

  // f = |x| at 0 along +1: one-sided derivative 1.
  const Point zero(R1, VectorXd::Zero(1));
  const auto kink = oracle::dini_estimate(
      [](const Point& p) { return std::abs(p.coords()[0]); }, zero, VectorXd::Ones(1));
  EXPECT_NEAR(kink.value, 1.0, 1e-12);

  // Tied max: derivative equals the max pairing over the active hull.
  const Manifold R2 = Manifold::euclidean(2);
  const Eigen::Vector2d c1(1.0, 0.5), c2(-0.3, 1.2);
  auto f = [c1, c2](const Point& p) {
    return std::max(c1.dot(p.coords()), c2.dot(p.coords()));
  };
  const Point origin(R2, Eigen::Vector2d(0, 0));  // tie point
  std::mt19937_64 rng(9);
  for (int k = 0; k < 20; ++k) {
    const VectorXd v = testoracle::random_vector(rng, 2);
    const auto est = oracle::dini_estimate(f, origin, v);
    EXPECT_NEAR(est.value, std::max(c1.dot(v), c2.dot(v)), 1e-6);
  }
}

TEST(SmallLsq, NnlsAndHullMembership) {
  // Unconstrained least squares agrees with the normal equations.
  std::mt19937_64 rng(11);
  const MatrixXd A = testoracle::random_matrix(rng, 6, 3);
  const VectorXd c = testoracle::random_vector(rng, 6);
  detail::LsqProblem prob;
  prob.A = A;
  prob.c = c;
  prob.nonneg.assign(3, false);
  const auto free = detail::solve_small_lsq(prob);
  EXPECT_LT((free.z - (A.transpose() * A).ldlt().solve(A.transpose() * c)).norm(), 1e-10);

  // Sign constraints bind: minimize |z a - c| with z >= 0 and a anti-parallel
  // to c pins z at zero.
  detail::LsqProblem pinned;
  pinned.A = MatrixXd::Constant(2, 1, 1.0);
  pinned.c = -VectorXd::Ones(2);
  pinned.nonneg.assign(1, true);
  const auto z0 = detail::solve_small_lsq(pinned);
  EXPECT_DOUBLE_EQ(z0.z[0], 0.0);

  // Hull membership: zero is in the hull of {(1,0), (-1,1), (-1,-1)} but not
  // of {(1,0), (1,1)}.
  MatrixXd hull1(2, 3);
  hull1 << 1, -1, -1, 0, 1, -1;
  EXPECT_LT(detail::min_norm_in_hull(hull1).objective, 1e-18);
  MatrixXd hull2(2, 2);
  hull2 << 1, 1, 0, 1;
  EXPECT_GT(detail::min_norm_in_hull(hull2).objective, 0.1);
}
