#pragma once

/** Builtin dynamics, costs, control sets, and constraint families used by
 * the problem-file front end. Everything here carries analytic derivatives,
 * and every analytic derivative is enrolled in the audit registry checked by
 * the test suite against finite differences.
 */

#include <dgmp/liegroup.hpp>
#include <dgmp/oracle.hpp>
#include <dgmp/solver.hpp>

#include <string>
#include <utility>
#include <vector>

namespace dgmp::builtins {

// --------------------------------------------------------------------------
// Dynamics

/// q+ = A q + B u.
inline Stage linear_stage(const MatrixXd& A, const MatrixXd& B) {
  if (A.rows() != A.cols() || A.rows() != B.rows()) {
    throw std::invalid_argument("linear_stage: dimension mismatch between A and B");
  }
  const Manifold Q = Manifold::euclidean(static_cast<int>(A.rows()));
  const Manifold U = Manifold::euclidean(static_cast<int>(B.cols()));
  Stage s = make_stage(Q, U, [A, B](const Point& q, const Point& u) {
    return Point(q.manifold(), VectorXd(A * q.coords() + B * u.coords()));
  });
  s.jac_state = [A](const Point&, const Point&) { return A; };
  s.jac_control = [B](const Point&, const Point&) { return B; };
  return s;
}

/// g+ = g u on SO(3) with group-valued controls.
inline Stage lie_multiplicative_stage() {
  const Manifold G = Manifold::so3();
  Stage s = make_stage(G, G, [](const Point& g, const Point& u) { return group_mul(g, u); });
  // Body-coordinate pushforwards: D_g F = Ad(u^-1), D_u F = id.
  s.jac_state = [](const Point&, const Point& u) {
    return MatrixXd(u.rotation().transpose());
  };
  s.jac_control = [](const Point&, const Point&) { return MatrixXd(MatrixXd::Identity(3, 3)); };
  return s;
}

/// g+ = g exp(hat(h u)) with controls in R^3 (factored through the algebra).
inline Stage so3_retraction_stage(double h) {
  if (h <= 0.0) throw std::invalid_argument("so3_retraction_stage: step must be positive");
  const Manifold G = Manifold::so3();
  const Manifold U = Manifold::euclidean(3);
  Factorization fac;
  fac.fibre_dim = 3;
  fac.fibre_map = [h](const Point&, const Point& u) { return VectorXd(h * u.coords()); };
  fac.bundle_map = [](const Point& g, const VectorXd& x) {
    return group_mul(g, so3_point(so3::exp(Vector3d(x))));
  };
  fac.fibre_jacobian = [](const Point&, const VectorXd& x) {
    return MatrixXd(so3::right_jacobian(Vector3d(x)));
  };
  fac.affine_in_control = true;
  Stage s = make_factored_stage(G, U, fac);
  s.jac_state = [h](const Point&, const Point& u) {
    return MatrixXd(so3::exp(Vector3d(h * u.coords())).transpose());
  };
  s.jac_control = [h](const Point&, const Point& u) {
    return MatrixXd(h * so3::right_jacobian(Vector3d(h * u.coords())));
  };
  return s;
}

/// q+ = q + V q + W u (factored affine form for the maximization condition).
inline Stage euclidean_affine_stage(const MatrixXd& V, const MatrixXd& W) {
  if (V.rows() != V.cols() || V.rows() != W.rows()) {
    throw std::invalid_argument("euclidean_affine_stage: dimension mismatch");
  }
  const Manifold Q = Manifold::euclidean(static_cast<int>(V.rows()));
  const Manifold U = Manifold::euclidean(static_cast<int>(W.cols()));
  Factorization fac;
  fac.fibre_dim = static_cast<int>(V.rows());
  fac.fibre_map = [V, W](const Point& q, const Point& u) {
    return VectorXd(V * q.coords() + W * u.coords());
  };
  fac.bundle_map = [](const Point& q, const VectorXd& x) {
    return Point(q.manifold(), VectorXd(q.coords() + x));
  };
  fac.fibre_jacobian = [d = static_cast<int>(V.rows())](const Point&, const VectorXd&) {
    return MatrixXd(MatrixXd::Identity(d, d));
  };
  fac.affine_in_control = true;
  Stage s = make_factored_stage(Q, U, fac);
  s.jac_state = [V](const Point&, const Point&) {
    return MatrixXd(MatrixXd::Identity(V.rows(), V.cols()) + V);
  };
  s.jac_control = [W](const Point&, const Point&) { return W; };
  return s;
}

// --------------------------------------------------------------------------
// Costs

/// 1/2 sum(q' Qc q + u' Rc u) + 1/2 (q_n - q_ref)' Qf (q_n - q_ref).
inline CostSpec quadratic_cost(const MatrixXd& Qc, const MatrixXd& Rc, const MatrixXd& Qf, int n,
                               const VectorXd& q_ref_in = VectorXd()) {
  CostSpec cost;
  const VectorXd q_ref = q_ref_in.size() ? q_ref_in : VectorXd(VectorXd::Zero(Qf.rows()));
  if (q_ref.size() != Qf.rows()) {
    throw std::invalid_argument("quadratic_cost: q_ref length does not match Qf");
  }
  cost.terminal = [Qf, q_ref](const Point& q) {
    const VectorXd d = q.coords() - q_ref;
    return 0.5 * d.dot(Qf * d);
  };
  cost.terminal_grad = [Qf, q_ref](const Point& q) {
    return VectorXd(Qf * (q.coords() - q_ref));
  };
  StageCost L;
  L.value = [Qc, Rc](const Point& q, const Point& u) {
    return 0.5 * q.coords().dot(Qc * q.coords()) + 0.5 * u.coords().dot(Rc * u.coords());
  };
  L.grad_state = [Qc](const Point& q, const Point&) { return VectorXd(Qc * q.coords()); };
  L.grad_control = [Rc](const Point&, const Point& u) { return VectorXd(Rc * u.coords()); };
  L.convex_in_control = true;
  cost.running.assign(n, L);
  return cost;
}

/// Geodesic-type terminal attitude error plus control effort for R^3-valued
/// controls on SO(3).
inline CostSpec so3_slew_cost(const Matrix3d& target, double terminal_weight,
                              double control_weight, int n) {
  CostSpec cost;
  const Point target_pt = so3_point(target);
  cost.terminal = [target_pt, terminal_weight](const Point& g) {
    return 0.5 * terminal_weight * local_coords(target_pt, g).squaredNorm();
  };
  cost.terminal_grad = [target_pt, terminal_weight](const Point& g) {
    // d(1/2 ||log||^2) in body coordinates is the log itself.
    return VectorXd(terminal_weight * local_coords(target_pt, g));
  };
  StageCost L;
  L.value = [control_weight](const Point&, const Point& u) {
    return 0.5 * control_weight * u.coords().squaredNorm();
  };
  L.grad_state = [](const Point&, const Point&) { return VectorXd(VectorXd::Zero(3)); };
  L.grad_control = [control_weight](const Point&, const Point& u) {
    return VectorXd(control_weight * u.coords());
  };
  L.convex_in_control = true;
  cost.running.assign(n, L);
  return cost;
}

// --------------------------------------------------------------------------
// Potentials

/// phi(R) = mgl (1 - e3 . R e3), the pendulum potential on SO(3).
inline std::pair<std::function<double(const Point&)>, std::function<VectorXd(const Point&)>>
so3_pendulum_potential(double mgl) {
  auto value = [mgl](const Point& g) {
    return mgl * (1.0 - Vector3d::UnitZ().dot(g.rotation() * Vector3d::UnitZ()));
  };
  auto diff = [mgl](const Point& g) {
    const Vector3d w = g.rotation().transpose() * Vector3d::UnitZ();
    return VectorXd(-mgl * Vector3d::UnitZ().cross(w));
  };
  return {value, diff};
}

// --------------------------------------------------------------------------
// Constraints

inline ConstraintFunc linear_mixed_constraint(const VectorXd& state_coeff,
                                              const VectorXd& control_coeff, double rhs) {
  ConstraintFunc f;
  f.value = [state_coeff, control_coeff, rhs](const Point& q, const Point& u) {
    return state_coeff.dot(q.coords()) + control_coeff.dot(u.coords()) - rhs;
  };
  f.grad_state = [state_coeff](const Point&, const Point&) { return state_coeff; };
  f.grad_control = [control_coeff](const Point&, const Point&) { return control_coeff; };
  return f;
}

inline EndpointFunc linear_terminal_constraint(const VectorXd& coeff, double rhs) {
  EndpointFunc f;
  f.value = [coeff, rhs](const Point& q) { return coeff.dot(q.coords()) - rhs; };
  f.grad = [coeff](const Point&) { return coeff; };
  return f;
}

// --------------------------------------------------------------------------
// Derivative audit registry

namespace detail_audit {

inline double rel_err(const VectorXd& got, const VectorXd& fd) {
  return (got - fd).norm() / std::max(1.0, fd.norm());
}

/// Worst relative FD error of a stage's analytic pushforwards over samples.
template <typename SampleQ, typename SampleU>
double audit_stage(const Stage& s, SampleQ sample_q, SampleU sample_u, int reps) {
  double worst = 0.0;
  std::mt19937_64 rng(2024);
  for (int k = 0; k < reps; ++k) {
    const Point q = sample_q(rng);
    const Point u = sample_u(rng);
    const MatrixXd jq_fd =
        dgmp::detail::fd_differential([&](const Point& x) { return s.map(x, u); }, q);
    const MatrixXd ju_fd =
        dgmp::detail::fd_differential([&](const Point& x) { return s.map(q, x); }, u);
    worst = std::max(worst, (s.jac_state(q, u) - jq_fd).norm() / std::max(1.0, jq_fd.norm()));
    worst = std::max(worst, (s.jac_control(q, u) - ju_fd).norm() / std::max(1.0, ju_fd.norm()));
    if (s.factored && s.factored->fibre_jacobian) {
      const VectorXd v = s.factored->fibre_map(q, u);
      const Point y0 = s.factored->bundle_map(q, v);
      MatrixXd fe_fd(y0.manifold().dim(), s.factored->fibre_dim);
      for (int j = 0; j < s.factored->fibre_dim; ++j) {
        VectorXd e = VectorXd::Zero(s.factored->fibre_dim);
        e[j] = 1e-6;
        fe_fd.col(j) = (local_coords(y0, s.factored->bundle_map(q, VectorXd(v + e))) -
                        local_coords(y0, s.factored->bundle_map(q, VectorXd(v - e)))) /
                       2e-6;
      }
      worst = std::max(worst, (s.factored->fibre_jacobian(q, v) - fe_fd).norm() /
                                  std::max(1.0, fe_fd.norm()));
    }
  }
  return worst;
}

template <typename SampleQ, typename SampleU>
double audit_cost(const CostSpec& cost, SampleQ sample_q, SampleU sample_u, int reps) {
  double worst = 0.0;
  std::mt19937_64 rng(4096);
  for (int k = 0; k < reps; ++k) {
    const Point q = sample_q(rng);
    const Point u = sample_u(rng);
    worst = std::max(worst, rel_err(cost.terminal_grad(q),
                                    oracle::fd_gradient(cost.terminal, q).grad));
    const StageCost& L = cost.running.front();
    worst = std::max(
        worst, rel_err(L.grad_state(q, u), oracle::fd_gradient([&](const Point& x) {
                                             return L.value(x, u);
                                           }, q).grad));
    worst = std::max(
        worst, rel_err(L.grad_control(q, u), oracle::fd_gradient([&](const Point& x) {
                                               return L.value(q, x);
                                             }, u).grad));
  }
  return worst;
}

inline Point sample_euclidean(std::mt19937_64& rng, int d, double scale = 1.0) {
  VectorXd v(d);
  for (int k = 0; k < d; ++k) v[k] = scale * (2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0);
  return Point(Manifold::euclidean(d), v);
}

inline Point sample_so3(std::mt19937_64& rng, double scale = 1.5) {
  VectorXd v(3);
  for (int k = 0; k < 3; ++k) v[k] = scale * (2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0);
  return so3_point(so3::exp(Vector3d(v)));
}

}  // namespace detail_audit

/// One audit per analytic-derivative family shipped above (plus the SO(3)
/// kinetic and the momentum-terminal cost from the integrator module). The
/// test suite runs every entry and checks the count, so a new analytic
/// derivative cannot land without an audit.
inline std::vector<oracle::DerivativeAudit> standard_derivative_audits() {
  using detail_audit::sample_euclidean;
  using detail_audit::sample_so3;
  std::vector<oracle::DerivativeAudit> audits;

  audits.push_back({"linear_stage", []() {
    std::mt19937_64 seed(7);
    MatrixXd A(3, 3), B(3, 2);
    A << 0.9, 0.1, 0, -0.2, 0.8, 0.05, 0, 0.3, 0.7;
    B << 1, 0, 0, 1, 0.5, -0.5;
    const Stage s = linear_stage(A, B);
    return detail_audit::audit_stage(
        s, [](auto& rng) { return detail_audit::sample_euclidean(rng, 3); },
        [](auto& rng) { return detail_audit::sample_euclidean(rng, 2); }, 5);
  }});

  audits.push_back({"lie_multiplicative_stage", []() {
    const Stage s = lie_multiplicative_stage();
    return detail_audit::audit_stage(
        s, [](auto& rng) { return detail_audit::sample_so3(rng); },
        [](auto& rng) { return detail_audit::sample_so3(rng); }, 5);
  }});

  audits.push_back({"so3_retraction_stage", []() {
    const Stage s = so3_retraction_stage(0.2);
    return detail_audit::audit_stage(
        s, [](auto& rng) { return detail_audit::sample_so3(rng); },
        [](auto& rng) { return detail_audit::sample_euclidean(rng, 3); }, 5);
  }});

  audits.push_back({"euclidean_affine_stage", []() {
    MatrixXd V(2, 2), W(2, 2);
    V << 0.3, -0.1, 0.2, 0.4;
    W << 1, 0.5, -0.5, 1;
    const Stage s = euclidean_affine_stage(V, W);
    return detail_audit::audit_stage(
        s, [](auto& rng) { return detail_audit::sample_euclidean(rng, 2); },
        [](auto& rng) { return detail_audit::sample_euclidean(rng, 2); }, 5);
  }});

  audits.push_back({"quadratic_cost", []() {
    const CostSpec cost = quadratic_cost(2.0 * MatrixXd::Identity(3, 3),
                                         0.5 * MatrixXd::Identity(2, 2),
                                         MatrixXd::Identity(3, 3), 1);
    return detail_audit::audit_cost(
        cost, [](auto& rng) { return detail_audit::sample_euclidean(rng, 3); },
        [](auto& rng) { return detail_audit::sample_euclidean(rng, 2); }, 5);
  }});

  audits.push_back({"so3_slew_cost", []() {
    const CostSpec cost = so3_slew_cost(so3::exp(Vector3d(0.4, -0.8, 1.1)), 1.3, 0.2, 1);
    return detail_audit::audit_cost(
        cost, [](auto& rng) { return detail_audit::sample_so3(rng, 0.8); },
        [](auto& rng) { return detail_audit::sample_euclidean(rng, 3); }, 5);
  }});

  audits.push_back({"so3_kinetic_diff", []() {
    const So3Kinetic k = so3_kinetic(Matrix3d(Vector3d(1, 2, 3).asDiagonal()), 0.05);
    double worst = 0.0;
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 5; ++rep) {
      const Point u = detail_audit::sample_so3(rng);
      worst = std::max(worst,
                       detail_audit::rel_err(k.diff(u), oracle::fd_gradient(k.value, u).grad));
    }
    return worst;
  }});

  audits.push_back({"so3_pendulum_potential", []() {
    auto [value, diff] = so3_pendulum_potential(2.5);
    double worst = 0.0;
    std::mt19937_64 rng(13);
    for (int rep = 0; rep < 5; ++rep) {
      const Point g = detail_audit::sample_so3(rng);
      worst = std::max(worst, detail_audit::rel_err(diff(g), oracle::fd_gradient(value, g).grad));
    }
    return worst;
  }});

  audits.push_back({"rigid_body_action_cost", []() {
    auto [value, diff] = so3_pendulum_potential(1.4);
    const LieGroupProblem prob =
        make_rigid_body_problem(Matrix3d(Vector3d(1, 1.6, 2.2).asDiagonal()), 0.05, value, diff);
    const CostSpec cost = action_cost(prob, 1);
    return detail_audit::audit_cost(
        cost, [](auto& rng) { return detail_audit::sample_so3(rng); },
        [](auto& rng) { return detail_audit::sample_so3(rng, 0.5); }, 5);
  }});

  audits.push_back({"momentum_terminal_cost", []() {
    const LieGroupProblem prob =
        make_rigid_body_problem(Matrix3d(Vector3d(1, 2, 3).asDiagonal()), 0.05);
    std::mt19937_64 rng(17);
    const Point g_ref = detail_audit::sample_so3(rng);
    const VectorXd p_ref = Eigen::Vector3d(0.4, -0.7, 0.2);
    const CostSpec cost = action_cost_with_momentum(prob, 1, g_ref, p_ref);
    double worst = 0.0;
    for (int rep = 0; rep < 5; ++rep) {
      const Point g = detail_audit::sample_so3(rng, 0.7);
      worst = std::max(worst, detail_audit::rel_err(cost.terminal_grad(g),
                                                    oracle::fd_gradient(cost.terminal, g).grad));
    }
    return worst;
  }});

  audits.push_back({"linear_constraints", []() {
    const VectorXd cq = Eigen::Vector3d(1, -2, 0.5);
    const VectorXd cu = Eigen::Vector2d(0.3, -1);
    const ConstraintFunc f = linear_mixed_constraint(cq, cu, 0.7);
    const EndpointFunc t = linear_terminal_constraint(cq, -0.4);
    std::mt19937_64 rng(19);
    double worst = 0.0;
    for (int rep = 0; rep < 3; ++rep) {
      const Point q = detail_audit::sample_euclidean(rng, 3);
      const Point u = detail_audit::sample_euclidean(rng, 2);
      worst = std::max(worst,
                       detail_audit::rel_err(f.grad_state(q, u),
                                             oracle::fd_gradient([&](const Point& x) {
                                               return f.value(x, u);
                                             }, q).grad));
      worst = std::max(worst,
                       detail_audit::rel_err(f.grad_control(q, u),
                                             oracle::fd_gradient([&](const Point& x) {
                                               return f.value(q, x);
                                             }, u).grad));
      worst = std::max(worst, detail_audit::rel_err(t.grad(q), oracle::fd_gradient(t.value, q).grad));
    }
    return worst;
  }});

  return audits;
}

/// Number of analytic-derivative families shipped; keeps the audit registry
/// honest when builtins are added.
inline constexpr int expected_audit_count() { return 11; }

}  // namespace dgmp::builtins
