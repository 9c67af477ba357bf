#include <dgmp/constraints.hpp>
#include <dgmp/oracle.hpp>
#include <gtest/gtest.h>

#include "support/problems.hpp"

using namespace dgmp;

namespace {

ConstraintFunc linear_mixed(const VectorXd& cq, const VectorXd& cu, double rhs) {
  ConstraintFunc f;
  f.value = [cq, cu, rhs](const Point& q, const Point& u) {
    return cq.dot(q.coords()) + cu.dot(u.coords()) - rhs;
  };
  f.grad_state = [cq](const Point&, const Point&) { return cq; };
  f.grad_control = [cu](const Point&, const Point&) { return cu; };
  return f;
}

EndpointFunc linear_terminal(const VectorXd& c, double rhs) {
  EndpointFunc f;
  f.value = [c, rhs](const Point& q) { return c.dot(q.coords()) - rhs; };
  f.grad = [c](const Point&) { return c; };
  return f;
}

ConstraintSet empty_constraints(int n) {
  ConstraintSet cons;
  cons.stage.resize(std::max(n, 1));
  return cons;
}

}  // namespace

TEST(PenaltyEval, FeasibleShiftedAndViolated) {
  // Two-stage single integrator; terminal constraint G(q) = q_1 <= e.
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1), 2);
  ConstraintSet cons = empty_constraints(2);
  cons.terminal_ineq.push_back(linear_terminal(VectorXd::Ones(1), 0.0));

  const Manifold U = Manifold::euclidean(1);
  auto traj_to = [&](double target) {
    return rollout(sys, Point(sys.state, VectorXd::Zero(1)),
                   {Point(U, VectorXd::Constant(1, target)), Point(U, VectorXd::Zero(1))});
  };

  EXPECT_DOUBLE_EQ(penalty_eval(cons, VectorXd::Zero(1), traj_to(-0.2)).total, 0.0);
  EXPECT_DOUBLE_EQ(penalty_eval(cons, VectorXd::Zero(1), traj_to(0.3)).total, 0.3);
  EXPECT_DOUBLE_EQ(penalty_eval(cons, VectorXd::Constant(1, 0.3), traj_to(0.3)).total, 0.0);

  EXPECT_THROW(penalty_eval(cons, VectorXd::Zero(2), traj_to(0.0)), std::invalid_argument);
}

TEST(PenaltyEval, ZeroSetIsExactlyTheFeasibleSet) {
  // P(e, u) = 0 iff every inequality holds and every equality is met.
  std::mt19937_64 rng(31);
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 3);
  ConstraintSet cons = empty_constraints(3);
  cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 0.5), 0.4));
  cons.stage[2].eq.push_back(linear_mixed(Eigen::Vector2d(0, 1), Eigen::Vector2d(1, 0), 0.1));
  cons.terminal_ineq.push_back(linear_terminal(Eigen::Vector2d(1, 1), 0.2));

  for (int k = 0; k < 200; ++k) {
    const VectorXd e = testoracle::random_vector(rng, 3, 0.5);
    const Trajectory traj = rollout(sys, Point(sys.state, testoracle::random_vector(rng, 2, 0.3)),
                                    testprob::random_controls(rng, sys, 0.3));
    const double P = penalty_eval(cons, e, traj).total;
    const double g1 = cons.stage[1].ineq[0].value(traj.states[1], traj.controls[1]) - e[0];
    const double h2 = cons.stage[2].eq[0].value(traj.states[2], traj.controls[2]) - e[1];
    const double gN = cons.terminal_ineq[0].value(traj.states[3]) - e[2];
    const bool feasible = g1 <= 0.0 && h2 == 0.0 && gN <= 0.0;
    EXPECT_EQ(P == 0.0, feasible);
    EXPECT_GE(P, 0.0);
  }
}

TEST(PenaltySubgradient, GeneratorSelection) {
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 2);
  ConstraintSet cons = empty_constraints(2);
  const VectorXd cq = Eigen::Vector2d(1, 0), cu = Eigen::Vector2d(0, 0);
  cons.stage[1].ineq.push_back(linear_mixed(cq, cu, 0.0));
  const Manifold U = Manifold::euclidean(2);

  // Strictly feasible: only the zero generator.
  {
    Trajectory traj = rollout(sys, Point(sys.state, Eigen::Vector2d(-1, 0)),
                              {Point(U, Eigen::Vector2d(0, 0)), Point(U, Eigen::Vector2d(0, 0))});
    const auto gens = penalty_subgradient(cons, VectorXd::Zero(1), traj, 1);
    ASSERT_EQ(gens.gens.size(), 1u);
    EXPECT_EQ(gens.gens[0].source, PenaltyGenerator::Source::ZeroTerm);
  }

  // Violated: the single active gradient.
  {
    Trajectory traj = rollout(sys, Point(sys.state, Eigen::Vector2d(0.5, 0)),
                              {Point(U, Eigen::Vector2d(0, 0)), Point(U, Eigen::Vector2d(0, 0))});
    const auto gens = penalty_subgradient(cons, VectorXd::Zero(1), traj, 1);
    ASSERT_EQ(gens.gens.size(), 1u);
    EXPECT_EQ(gens.gens[0].a, cq);
    EXPECT_EQ(gens.gens[0].b, cu);
  }
}

TEST(PenaltySubgradient, TiedMaxMatchesHullDiniOracle) {
  // Two inequalities tied at the max: the Dini derivative of phi along any
  // direction equals the max pairing over the generator hull.
  std::mt19937_64 rng(33);
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 2);
  ConstraintSet cons = empty_constraints(2);
  const VectorXd cq1 = Eigen::Vector2d(1, 0.3), cu1 = Eigen::Vector2d(0.2, 0);
  const VectorXd cq2 = Eigen::Vector2d(-0.4, 1), cu2 = Eigen::Vector2d(0, -0.6);
  cons.stage[1].ineq.push_back(linear_mixed(cq1, cu1, 0.0));
  cons.stage[1].ineq.push_back(linear_mixed(cq2, cu2, 0.0));

  // Choose q_1, u_1 with g_1 = g_2 = 0.3 > 0: solve the 2x2 system in q_1
  // with u_1 = 0, then pick the control u_0 to reach q_1.
  Eigen::Matrix2d M;
  M << cq1.transpose(), cq2.transpose();
  const Eigen::Vector2d q1 = M.colPivHouseholderQr().solve(Eigen::Vector2d(0.3, 0.3));
  const Manifold U = Manifold::euclidean(2);
  Trajectory traj = rollout(sys, Point(sys.state, Eigen::Vector2d(0, 0)),
                            {Point(U, q1), Point(U, Eigen::Vector2d(0, 0))});

  const auto gens = penalty_subgradient(cons, VectorXd::Zero(2), traj, 1);
  ASSERT_EQ(gens.gens.size(), 2u);

  for (int k = 0; k < 20; ++k) {
    const VectorXd vq = testoracle::random_vector(rng, 2);
    const VectorXd vu = testoracle::random_vector(rng, 2);
    // FD quotient of phi along the direction.
    auto phi_at = [&](double t) {
      Trajectory tt = traj;
      tt.states[1] = retract(traj.states[1], VectorXd(t * vq));
      tt.controls[1] = retract(traj.controls[1], VectorXd(t * vu));
      // Keep the trajectory consistent downstream of the probe point.
      tt.states[2] = sys.stages[1].map(tt.states[1], tt.controls[1]);
      double phi = 0.0;
      for (const auto& g : cons.stage[1].ineq) {
        phi = std::max(phi, g.value(tt.states[1], tt.controls[1]));
      }
      return phi;
    };
    const double fd = (phi_at(1e-7) - phi_at(0.0)) / 1e-7;
    double hull = -std::numeric_limits<double>::infinity();
    for (const auto& g : gens.gens) {
      hull = std::max(hull, g.a.dot(vq) + g.b.dot(vu));
    }
    EXPECT_NEAR(fd, hull, 1e-6);
  }
}

TEST(LicqCheck, SingleAndDuplicatedConstraints) {
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 2);
  const Manifold U = Manifold::euclidean(2);
  auto active_traj = rollout(sys, Point(sys.state, Eigen::Vector2d(0, 0)),
                             {Point(U, Eigen::Vector2d(0, 0)), Point(U, Eigen::Vector2d(0, 0))});

  // One nonzero gradient: regular.
  {
    ConstraintSet cons = empty_constraints(2);
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 0), 0.0));
    EXPECT_TRUE(licq_check(cons, active_traj, 1, VectorXd::Zero(1)).regular);
  }

  // The same inequality twice: rank-deficient, but lambda >= 0 rejects the
  // (1, -1) combination, so still regular.
  {
    ConstraintSet cons = empty_constraints(2);
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 0), 0.0));
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 0), 0.0));
    EXPECT_TRUE(licq_check(cons, active_traj, 1, VectorXd::Zero(2)).regular);
  }

  // Opposite-gradient pair: the (1, 1) combination annihilates, degenerate.
  {
    ConstraintSet cons = empty_constraints(2);
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(1, 0), Eigen::Vector2d(0, 0), 0.0));
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(-1, 0), Eigen::Vector2d(0, 0), 0.0));
    const LicqReport rep = licq_check(cons, active_traj, 1, VectorXd::Zero(2));
    EXPECT_FALSE(rep.regular);
    ASSERT_EQ(rep.witness_lambda.size(), 2);
    EXPECT_NEAR(rep.witness_lambda[0], rep.witness_lambda[1], 1e-9);
    EXPECT_LT(rep.witness_residual, 1e-10);
  }
}

TEST(LicqCheck, RandomFullRankGradientsAreRegular) {
  std::mt19937_64 rng(35);
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(3, 3), MatrixXd::Identity(3, 3), 2);
  const Manifold U = Manifold::euclidean(3);
  auto traj = rollout(sys, Point(sys.state, VectorXd::Zero(3)),
                      {Point(U, VectorXd::Zero(3)), Point(U, VectorXd::Zero(3))});
  for (int seed = 0; seed < 100; ++seed) {
    ConstraintSet cons = empty_constraints(2);
    // Three constraints over the 6-dimensional (q, u) space.
    for (int j = 0; j < 2; ++j) {
      cons.stage[1].ineq.push_back(
          linear_mixed(testoracle::random_vector(rng, 3), testoracle::random_vector(rng, 3), 0.0));
    }
    cons.stage[1].eq.push_back(
        linear_mixed(testoracle::random_vector(rng, 3), testoracle::random_vector(rng, 3), 0.0));
    EXPECT_TRUE(licq_check(cons, traj, 1, VectorXd::Zero(3)).regular);
  }
}

TEST(LicqCheck, ScaleInvariantVerdict) {
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 2);
  const Manifold U = Manifold::euclidean(2);
  auto traj = rollout(sys, Point(sys.state, Eigen::Vector2d(0, 0)),
                      {Point(U, Eigen::Vector2d(0, 0)), Point(U, Eigen::Vector2d(0, 0))});
  for (double s : {1e-3, 1.0, 1e3}) {
    ConstraintSet cons = empty_constraints(2);
    cons.stage[1].ineq.push_back(
        linear_mixed(s * Eigen::Vector2d(1, 0), s * Eigen::Vector2d(0, 0), 0.0));
    cons.stage[1].ineq.push_back(
        linear_mixed(s * Eigen::Vector2d(-1, 0), s * Eigen::Vector2d(0, 0), 0.0));
    EXPECT_FALSE(licq_check(cons, traj, 1, VectorXd::Zero(2)).regular) << "scale " << s;

    ConstraintSet single = empty_constraints(2);
    single.stage[1].ineq.push_back(
        linear_mixed(s * Eigen::Vector2d(1, 0), s * Eigen::Vector2d(0, 0), 0.0));
    EXPECT_TRUE(licq_check(single, traj, 1, VectorXd::Zero(1)).regular) << "scale " << s;
  }
}

TEST(StrictNormality, UnconstrainedAndControllableAreNormal) {
  // No constraints: trivially strictly normal.
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 2);
  ConstraintSet none = empty_constraints(2);
  const Manifold U = Manifold::euclidean(2);
  auto traj = rollout(sys, Point(sys.state, Eigen::Vector2d(0.3, -0.1)),
                      {Point(U, Eigen::Vector2d(0.2, 0)), Point(U, Eigen::Vector2d(0, 0.1))});
  EXPECT_TRUE(strict_normality_check(sys, traj, none, VectorXd()).strictly_normal);

  // Endpoint equality with surjective D_uF at every stage: strictly normal
  // (the linear program over multipliers has only the zero solution).
  MatrixXd A(2, 2);
  A << 1, 0.1, 0, 1;
  ControlSystem intg = testprob::linear_system(A, MatrixXd::Identity(2, 2), 2);
  ConstraintSet cons = empty_constraints(2);
  const Eigen::Vector2d c(1, -2);
  auto feasible = rollout(intg, Point(intg.state, Eigen::Vector2d(0.5, 0.2)),
                          {Point(U, Eigen::Vector2d(0.1, 0)), Point(U, Eigen::Vector2d(0, 0))});
  cons.terminal_eq.push_back(linear_terminal(c, c.dot(feasible.states[2].coords())));
  EXPECT_TRUE(strict_normality_check(intg, feasible, cons, VectorXd::Zero(1)).strictly_normal);
}

TEST(StrictNormality, UncontrollableEndpointIsAbnormal) {
  // One stage, D_uF = 0, endpoint equality with nonzero gradient: the
  // certificate p_1 = -mu c exists for any mu != 0.
  const Manifold Q = Manifold::euclidean(2);
  const Manifold U = Manifold::euclidean(1);
  MatrixXd A(2, 2);
  A << 0.9, 0, 0.2, 1.1;
  Stage s = make_stage(Q, U, [A](const Point& q, const Point&) {
    return Point(q.manifold(), VectorXd(A * q.coords()));
  });
  s.jac_state = [A](const Point&, const Point&) { return A; };
  s.jac_control = [](const Point&, const Point&) { return MatrixXd(MatrixXd::Zero(2, 1)); };
  ControlSystem sys = make_control_system(Q, {s}, {ControlSet::whole(U)});

  const Eigen::Vector2d q0(0.4, -0.3);
  auto traj = rollout(sys, Point(Q, q0), {Point(U, VectorXd::Zero(1))});
  const Eigen::Vector2d c(2, 1);
  ConstraintSet cons = empty_constraints(1);
  cons.terminal_eq.push_back(linear_terminal(c, c.dot(traj.states[1].coords())));

  const NormalityReport rep = strict_normality_check(sys, traj, cons, VectorXd::Zero(1));
  EXPECT_FALSE(rep.strictly_normal);
  EXPECT_LT(rep.residual, 1e-12);
  // Witness costate is proportional to the endpoint gradient.
  const double mu = rep.witness.eq[1][0];
  EXPECT_GT(std::abs(mu), 1e-9);
  EXPECT_LT((rep.costates[1] + mu * c).norm(), 1e-12);

  // Infeasible trajectories are rejected.
  ConstraintSet off = empty_constraints(1);
  off.terminal_eq.push_back(linear_terminal(c, c.dot(traj.states[1].coords()) + 1.0));
  EXPECT_THROW(strict_normality_check(sys, traj, off, VectorXd::Zero(1)), std::invalid_argument);
}

TEST(BoundedSlope, PureStateStateFreeAndMixed) {
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 2);
  const Manifold U = Manifold::euclidean(2);
  auto traj = rollout(sys, Point(sys.state, Eigen::Vector2d(0, 0)),
                      {Point(U, Eigen::Vector2d(0, 0)), Point(U, Eigen::Vector2d(0, 0))});

  // Pure-state constraint: all b = 0, passes for every kappa >= 0.
  {
    ConstraintSet cons = empty_constraints(2);
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(1, 1), Eigen::Vector2d(0, 0), 0.0));
    const auto rep = bounded_slope_check(cons, traj, 0.0);
    EXPECT_TRUE(rep.pass);
    EXPECT_DOUBLE_EQ(rep.worst_ratio, 0.0);
  }

  // State-free constraint g = u_1: ratio infinite, automatic fail.
  {
    ConstraintSet cons = empty_constraints(2);
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 0), 0.0));
    const auto rep = bounded_slope_check(cons, traj, 100.0);
    EXPECT_FALSE(rep.pass);
    EXPECT_TRUE(std::isinf(rep.worst_ratio));
  }

  // g = q_1 + 0.5 u_1: worst ratio 0.5, passes with kappa = 1.
  {
    ConstraintSet cons = empty_constraints(2);
    cons.stage[1].ineq.push_back(linear_mixed(Eigen::Vector2d(1, 0), Eigen::Vector2d(0.5, 0), 0.0));
    const auto rep = bounded_slope_check(cons, traj, 1.0);
    EXPECT_TRUE(rep.pass);
    EXPECT_NEAR(rep.worst_ratio, 0.5, 1e-12);
    EXPECT_FALSE(bounded_slope_check(cons, traj, 0.4).pass);
  }
}

TEST(ConstrainedConditions, ZeroMultipliersReproduceAdjointExactly) {
  std::mt19937_64 rng(37);
  const int n = 4, d = 3, m = 2;
  ControlSystem sys = testprob::random_euclidean_system(rng, n, d, m);
  CostSpec cost = testprob::random_euclidean_cost(rng, n, d, m);
  ConstraintSet cons = empty_constraints(n);
  cons.terminal_ineq.push_back(linear_terminal(testoracle::random_vector(rng, d), 100.0));

  const Trajectory traj = rollout(sys, Point(sys.state, testoracle::random_vector(rng, d)),
                                  testprob::random_controls(rng, sys));
  const auto rep = constrained_conditions_residual(sys, traj, cost, cons, zero_multipliers(cons),
                                                   VectorXd::Zero(1));
  const auto r = cost_gradient(sys, cost, traj);
  const auto cert = criticality_certificate(sys, cost, traj);
  for (int i = 0; i < n; ++i) {
    EXPECT_TRUE(rep.stationarity[i] == r[i]);  // identical code path, bit for bit
    EXPECT_DOUBLE_EQ(rep.stationarity_delta[i], cert.per_stage_delta[i]);
  }
  EXPECT_DOUBLE_EQ(rep.max_slackness_violation, 0.0);

  MultiplierSequence bad = zero_multipliers(cons);
  bad.ineq[n][0] = -0.5;
  EXPECT_THROW(constrained_conditions_residual(sys, traj, cost, cons, bad, VectorXd::Zero(1)),
               std::invalid_argument);
}

TEST(ConstrainedConditions, EqualityConstrainedLqrMatchesKktOracle) {
  // Endpoint equality c^T q_n = d on an LQR: multipliers recovered by
  // nonnegative least squares match the dense KKT solve of the equivalent
  // equality-constrained QP.
  std::mt19937_64 rng(39);
  const int d = 3, m = 2, n = 6;
  MatrixXd A = testoracle::random_matrix(rng, d, d);
  A *= 0.9 / std::max(1e-9, A.operatorNorm());
  const MatrixXd B = testoracle::random_matrix(rng, d, m);
  const MatrixXd Qc = MatrixXd::Identity(d, d), Rc = MatrixXd::Identity(m, m),
                 Qf = MatrixXd::Identity(d, d);
  const VectorXd q0 = testoracle::random_vector(rng, d);
  const VectorXd c = testoracle::random_vector(rng, d);
  const double rhs = 0.25;

  // Stacked QP: states = Phi q0 + Gamma u.
  MatrixXd Gamma = MatrixXd::Zero(d * n, m * n);
  MatrixXd Phi(d * n, d);
  {
    MatrixXd Ak = MatrixXd::Identity(d, d);
    for (int i = 0; i < n; ++i) {
      Ak = A * Ak;
      Phi.middleRows(i * d, d) = Ak;
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j <= i; ++j) {
        MatrixXd blk = B;
        for (int k = j + 1; k <= i; ++k) blk = A * blk;
        Gamma.block(i * d, j * m, d, m) = blk;
      }
    }
  }
  MatrixXd H = MatrixXd::Zero(m * n, m * n);
  VectorXd g = VectorXd::Zero(m * n);
  for (int i = 0; i < n; ++i) {
    const MatrixXd W = (i + 1 < n) ? Qc : Qf;
    const MatrixXd Gi = Gamma.middleRows(i * d, d);
    const VectorXd base = Phi.middleRows(i * d, d) * q0;
    H += Gi.transpose() * W * Gi;
    g += Gi.transpose() * W * base;
    H.block(i * m, i * m, m, m) += Rc;
  }
  MatrixXd E = c.transpose() * Gamma.middleRows((n - 1) * d, d);
  VectorXd rhs_v(1);
  rhs_v << rhs - c.dot(Phi.middleRows((n - 1) * d, d) * q0);
  const auto kkt = testoracle::solve_equality_qp(H, g, E, rhs_v);

  ControlSystem sys = testprob::linear_system(A, B, n);
  CostSpec cost = testprob::lqr_cost(Qc, Rc, Qf, n);
  ConstraintSet cons = empty_constraints(n);
  cons.terminal_eq.push_back(linear_terminal(c, rhs));

  std::vector<Point> u;
  for (int i = 0; i < n; ++i) {
    u.emplace_back(sys.stages[0].control, VectorXd(kkt.z.segment(i * m, m)));
  }
  const Trajectory traj = rollout(sys, Point(sys.state, q0), u);
  EXPECT_LT(penalty_eval(cons, VectorXd::Zero(1), traj).total, 1e-9);

  const auto assembly = assemble_multipliers(sys, traj, cost, cons, VectorXd::Zero(1));
  EXPECT_EQ(assembly.status, MultiplierAssembly::Status::Normal);
  EXPECT_LT(assembly.residual, 1e-6);
  EXPECT_NEAR(assembly.multipliers.eq[n][0], kkt.multipliers[0],
              1e-5 * std::max(1.0, std::abs(kkt.multipliers[0])));

  const auto rep =
      constrained_conditions_residual(sys, traj, cost, cons, assembly.multipliers, VectorXd::Zero(1));
  EXPECT_LT(rep.max_stationarity_delta, 1e-6);
}

TEST(AssembleMultipliers, UnconstrainedStationaryAndActiveBound) {
  // Unconstrained stationary point: all multipliers zero, normal branch.
  std::mt19937_64 rng(41);
  const int d = 2, m = 2, n = 4;
  MatrixXd A = 0.5 * MatrixXd::Identity(d, d);
  const MatrixXd B = MatrixXd::Identity(d, m);
  const auto ric = oracle::riccati_lqr(A, B, MatrixXd::Identity(d, d), MatrixXd::Identity(m, m),
                                       MatrixXd::Identity(d, d), n,
                                       testoracle::random_vector(rng, d));
  ControlSystem sys = testprob::linear_system(A, B, n);
  CostSpec cost = testprob::lqr_cost(MatrixXd::Identity(d, d), MatrixXd::Identity(m, m),
                                     MatrixXd::Identity(d, d), n);
  ConstraintSet cons = empty_constraints(n);
  cons.terminal_ineq.push_back(linear_terminal(Eigen::Vector2d(1, 0), 50.0));  // inactive
  std::vector<Point> u;
  for (const auto& uc : ric.controls) u.emplace_back(sys.stages[0].control, uc);
  const Trajectory traj = rollout(sys, Point(sys.state, ric.states[0]), u);

  const auto assembly = assemble_multipliers(sys, traj, cost, cons, VectorXd::Zero(1));
  EXPECT_EQ(assembly.status, MultiplierAssembly::Status::Normal);
  EXPECT_DOUBLE_EQ(assembly.multipliers.ineq[n][0], 0.0);
  EXPECT_LT(assembly.residual, 1e-8);

  // Active bound: minimize (u - 2)^2 with endpoint q_1 = u <= 1. The KKT
  // multiplier of the active bound is 2 (hand-solvable quadratic).
  const Manifold Q1 = Manifold::euclidean(1);
  Stage pick = make_stage(Q1, Q1, [](const Point&, const Point& u2) { return u2; });
  pick.jac_state = [](const Point&, const Point&) { return MatrixXd(MatrixXd::Zero(1, 1)); };
  pick.jac_control = [](const Point&, const Point&) { return MatrixXd(MatrixXd::Identity(1, 1)); };
  ControlSystem bound_sys = make_control_system(Q1, {pick}, {ControlSet::whole(Q1)});
  CostSpec bound_cost;
  bound_cost.terminal = [](const Point& q) { return std::pow(q.coords()[0] - 2.0, 2); };
  bound_cost.terminal_grad = [](const Point& q) {
    return VectorXd(VectorXd::Constant(1, 2.0 * (q.coords()[0] - 2.0)));
  };
  StageCost zero;
  zero.value = [](const Point&, const Point&) { return 0.0; };
  zero.grad_state = [](const Point&, const Point&) { return VectorXd(VectorXd::Zero(1)); };
  zero.grad_control = [](const Point&, const Point&) { return VectorXd(VectorXd::Zero(1)); };
  bound_cost.running = {zero};
  ConstraintSet bound_cons = empty_constraints(1);
  bound_cons.terminal_ineq.push_back(linear_terminal(VectorXd::Ones(1), 1.0));

  const Trajectory at_bound = rollout(bound_sys, Point(Q1, VectorXd::Zero(1)),
                                      {Point(Q1, VectorXd::Ones(1))});
  const auto bound_assembly =
      assemble_multipliers(bound_sys, at_bound, bound_cost, bound_cons, VectorXd::Zero(1));
  EXPECT_EQ(bound_assembly.status, MultiplierAssembly::Status::Normal);
  EXPECT_NEAR(bound_assembly.multipliers.ineq[1][0], 2.0, 1e-9);
}

TEST(AssembleMultipliers, AbnormalToyFallsBackToDegenerateBranch) {
  const Manifold Q = Manifold::euclidean(2);
  const Manifold U = Manifold::euclidean(1);
  MatrixXd A(2, 2);
  A << 0.9, 0, 0.2, 1.1;
  Stage s = make_stage(Q, U, [A](const Point& q, const Point&) {
    return Point(q.manifold(), VectorXd(A * q.coords()));
  });
  s.jac_state = [A](const Point&, const Point&) { return A; };
  s.jac_control = [](const Point&, const Point&) { return MatrixXd(MatrixXd::Zero(2, 1)); };
  ControlSystem sys = make_control_system(Q, {s}, {ControlSet::whole(U)});
  const Eigen::Vector2d q0(0.4, -0.3);
  auto traj = rollout(sys, Point(Q, q0), {Point(U, VectorXd::Zero(1))});

  const Eigen::Vector2d c(2, 1);
  ConstraintSet cons = empty_constraints(1);
  cons.terminal_eq.push_back(linear_terminal(c, c.dot(traj.states[1].coords())));

  // The cost pulls along a direction no multiplier can cancel through the
  // (zero) control Jacobian unless lambda0 = 0.
  CostSpec cost;
  cost.terminal = [](const Point& q) { return q.coords()[0]; };
  cost.terminal_grad = [](const Point&) { return VectorXd(Eigen::Vector2d(1, 0)); };
  StageCost lin;
  lin.value = [](const Point&, const Point& u) { return u.coords()[0]; };
  lin.grad_state = [](const Point&, const Point&) { return VectorXd(VectorXd::Zero(2)); };
  lin.grad_control = [](const Point&, const Point&) { return VectorXd(VectorXd::Ones(1)); };
  cost.running = {lin};

  const auto assembly = assemble_multipliers(sys, traj, cost, cons, VectorXd::Zero(1));
  EXPECT_EQ(assembly.status, MultiplierAssembly::Status::Degenerate);
  EXPECT_EQ(assembly.multipliers.lambda0, 0.0);

  // Witness direction agrees with the strict-normality certificate up to scale.
  const auto norm_rep = strict_normality_check(sys, traj, cons, VectorXd::Zero(1));
  ASSERT_FALSE(norm_rep.strictly_normal);
  const double a = assembly.multipliers.eq[1][0];
  const double b = norm_rep.witness.eq[1][0];
  EXPECT_NEAR(std::abs(a), std::abs(b), 1e-9);
}

TEST(DecreaseCertificate, VacuousScalarAndBox) {
  // Empty constraint set: vacuous pass.
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1), 1);
  const Manifold U = Manifold::euclidean(1);
  auto traj0 = rollout(sys, Point(sys.state, VectorXd::Zero(1)), {Point(U, VectorXd::Zero(1))});
  ConstraintSet none = empty_constraints(1);
  EXPECT_TRUE(decrease_certificate(sys, none, VectorXd(), traj0, 0.5, 1.0).decrease_ok);

  // Scalar constraint q_1 = u <= e: direction -1 decreases the penalty at
  // rate 1 and the distance equals the penalty.
  ConstraintSet cons = empty_constraints(1);
  cons.terminal_ineq.push_back(linear_terminal(VectorXd::Ones(1), 0.0));
  auto feas = rollout(sys, Point(sys.state, VectorXd::Zero(1)),
                      {Point(U, VectorXd::Constant(1, -0.2))});
  auto dist = [](const std::vector<Point>& u, const VectorXd& e) {
    return std::max(0.0, u[0].coords()[0] - e[0]);
  };
  const auto rep = decrease_certificate(sys, cons, VectorXd::Zero(1), feas, 0.6, 1.0, dist, 60, 32);
  EXPECT_GT(rep.infeasible_samples, 0);
  EXPECT_TRUE(rep.decrease_ok) << rep.counterexample;
  EXPECT_TRUE(rep.distance_bound_ok) << rep.counterexample;
  EXPECT_LT(std::abs(rep.worst_distance_margin), 1e-9);  // bound tight for this geometry
}

TEST(DecreaseCertificate, PlanarBoxDistanceBound) {
  // Identity map into the unit box, Delta = 1/sqrt(2):
  // d(u, box) <= sqrt(2) P(u) with exact clamp distances.
  ControlSystem sys = testprob::linear_system(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2), 1);
  const Manifold U = Manifold::euclidean(2);
  ConstraintSet cons = empty_constraints(1);
  // Box [0,1]^2 written as four terminal inequalities.
  cons.terminal_ineq.push_back(linear_terminal(Eigen::Vector2d(1, 0), 1.0));
  cons.terminal_ineq.push_back(linear_terminal(Eigen::Vector2d(-1, 0), 0.0));
  cons.terminal_ineq.push_back(linear_terminal(Eigen::Vector2d(0, 1), 1.0));
  cons.terminal_ineq.push_back(linear_terminal(Eigen::Vector2d(0, -1), 0.0));

  auto traj0 = rollout(sys, Point(sys.state, Eigen::Vector2d(0, 0)),
                       {Point(U, Eigen::Vector2d(0.5, 0.5))});
  auto dist = [](const std::vector<Point>& u, const VectorXd& e) {
    const oracle::BoxRegion box{Eigen::Vector2d(-e[1], -e[3]), Eigen::Vector2d(1 + e[0], 1 + e[2])};
    return oracle::region_distance(box, u[0].coords());
  };
  const auto rep = decrease_certificate(sys, cons, VectorXd::Zero(4), traj0, 0.8,
                                        1.0 / std::sqrt(2.0), dist, 80, 48);
  EXPECT_GT(rep.infeasible_samples, 0);
  EXPECT_TRUE(rep.decrease_ok) << rep.counterexample;
  EXPECT_TRUE(rep.distance_bound_ok) << rep.counterexample;

  // Infeasible base pair is rejected.
  auto bad = rollout(sys, Point(sys.state, Eigen::Vector2d(0, 0)),
                     {Point(U, Eigen::Vector2d(2.0, 0.5))});
  EXPECT_THROW(decrease_certificate(sys, cons, VectorXd::Zero(4), bad, 0.5, 1.0),
               std::invalid_argument);
}
