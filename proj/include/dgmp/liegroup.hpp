#pragma once

/** Multiplicative control systems on Lie groups: costate evolution in the
 * dual algebra, the discrete Legendre transform, and the Hamiltonian
 * variational integrator with its SO(3) rigid-body instance.
 *
 * Group steps solve the implicit momentum-matching equation
 *     p_i = h Ad*_{u}(dK(u)) + (h/2) m_i
 * by Newton's method on the algebra; on SO(3) with the kinetic
 * K(u) = tr((I - u) J_d)/h this is the Moser-Veselov equation.
 */

#include <dgmp/adjoint.hpp>

#include <functional>
#include <optional>
#include <vector>

namespace dgmp {

namespace so3 {

/// Inverse of the right Jacobian of exp.
inline Matrix3d right_jacobian_inverse(const Vector3d& a) {
  const double theta = a.norm();
  const Matrix3d A = hat(a);
  if (theta < 1e-6) {
    return Matrix3d::Identity() + 0.5 * A + (1.0 / 12.0) * A * A;
  }
  const double c = 1.0 / (theta * theta) -
                   (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Matrix3d::Identity() + 0.5 * A + c * A * A;
}

}  // namespace so3

class NewtonDivergence : public std::runtime_error {
 public:
  NewtonDivergence(const std::string& what, int step_index)
      : std::runtime_error(what), step_index_(step_index) {}
  int step_index() const { return step_index_; }

 private:
  int step_index_;
};

struct LieGroupProblem {
  Manifold group = Manifold::so3();
  double step = 0.0;  // h > 0
  std::function<double(const Point&)> kinetic;
  std::function<VectorXd(const Point&)> kinetic_diff;    // dK in body coordinates; FD fallback
  std::function<double(const Point&)> potential;         // optional, 0 when absent
  std::function<VectorXd(const Point&)> potential_diff;  // FD fallback
  std::optional<Matrix3d> so3_inertia;                   // J_d, used to seed the Newton solve
};

inline VectorXd kinetic_diff(const LieGroupProblem& prob, const Point& u) {
  if (prob.kinetic_diff) return prob.kinetic_diff(u);
  return detail::fd_point_gradient(prob.kinetic, u);
}

inline double potential_value(const LieGroupProblem& prob, const Point& g) {
  return prob.potential ? prob.potential(g) : 0.0;
}

/// m(g) = d(potential)(g) in body coordinates.
inline VectorXd potential_diff(const LieGroupProblem& prob, const Point& g) {
  if (!prob.potential) return VectorXd::Zero(prob.group.dim());
  if (prob.potential_diff) return prob.potential_diff(g);
  return detail::fd_point_gradient(prob.potential, g);
}

/// The SO(3) kinetic K(u) = tr((I - u) J_d) / h with its analytic
/// differential dK(u) = vee(J_d u - u^T J_d) / h. Requires J_d positive
/// definite.
struct So3Kinetic {
  std::function<double(const Point&)> value;
  std::function<VectorXd(const Point&)> diff;
};

inline So3Kinetic so3_kinetic(const Matrix3d& J_d, double h) {
  if ((J_d - J_d.transpose()).norm() > 1e-12 * (1.0 + J_d.norm())) {
    throw std::invalid_argument("so3_kinetic: J_d must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix3d> es(J_d);
  if (es.eigenvalues().minCoeff() <= 0.0) {
    throw std::invalid_argument("so3_kinetic: J_d must be positive definite");
  }
  if (h <= 0.0) throw std::invalid_argument("so3_kinetic: step size must be positive");
  So3Kinetic k;
  k.value = [J_d, h](const Point& u) {
    return ((Matrix3d::Identity() - u.rotation()) * J_d).trace() / h;
  };
  k.diff = [J_d, h](const Point& u) {
    const Matrix3d R = u.rotation();
    return VectorXd(vee(Matrix3d(J_d * R - R.transpose() * J_d)) / h);
  };
  return k;
}

/// Checks the stepping hypotheses: dK(e) = 0 and dK full rank at e.
inline void validate_lie_problem(const LieGroupProblem& prob) {
  if (prob.step <= 0.0) throw std::invalid_argument("LieGroupProblem: step size must be positive");
  if (!prob.kinetic) throw std::invalid_argument("LieGroupProblem: kinetic energy is required");
  const Point e = identity_point(prob.group);
  const VectorXd dk0 = kinetic_diff(prob, e);
  if (dk0.norm() > 1e-10) {
    throw std::invalid_argument("LieGroupProblem: dK(e) = 0 fails (norm " +
                                std::to_string(dk0.norm()) + ")");
  }
  const MatrixXd jac =
      detail::fd_differential_vec([&](const Point& u) { return kinetic_diff(prob, u); }, e);
  Eigen::JacobiSVD<MatrixXd> svd(jac);
  if (svd.singularValues().minCoeff() < 1e-8) {
    throw std::invalid_argument("LieGroupProblem: dK is rank-deficient at the identity");
  }
}

inline LieGroupProblem make_rigid_body_problem(
    const Matrix3d& J_d, double h, std::function<double(const Point&)> potential = nullptr,
    std::function<VectorXd(const Point&)> potential_diff = nullptr) {
  LieGroupProblem prob;
  prob.group = Manifold::so3();
  prob.step = h;
  So3Kinetic k = so3_kinetic(J_d, h);
  prob.kinetic = std::move(k.value);
  prob.kinetic_diff = std::move(k.diff);
  prob.potential = std::move(potential);
  prob.potential_diff = std::move(potential_diff);
  prob.so3_inertia = J_d;
  validate_lie_problem(prob);
  return prob;
}

// --------------------------------------------------------------------------
// Costate evolution and Legendre transform

/// Forward costate step p_{i+1} = Ad*(u)(p_i + d_gL_i); the coadjoint here is
/// the pullback along D_qF for the multiplicative system g_{i+1} = g_i u_i.
inline VectorXd lie_costate_step(const VectorXd& p, const VectorXd& d_gL, const Point& u) {
  return Ad_star(group_inv(u), VectorXd(p + d_gL));
}

/// Inverse relation: recovers p_i from p_{i+1}.
inline VectorXd lie_costate_step_back(const VectorXd& p_next, const VectorXd& d_gL,
                                      const Point& u) {
  return VectorXd(-d_gL + Ad_star(u, p_next));
}

/// Discrete Legendre transform F+L(g, u) = d_u L(g, u) in body coordinates.
inline VectorXd legendre_plus(const StageCost& L, const Point& g, const Point& u) {
  return stage_cost_grad_control(L, g, u);
}

// --------------------------------------------------------------------------
// Variational stepping

struct VariationalStep {
  Point control = identity_point(Manifold::so3());     // u_i
  Point state_next = identity_point(Manifold::so3());  // g_{i+1} = g_i u_i
  VectorXd momentum_next;  // p_{i+1}
  VectorXd m;              // d(potential)(g_i)
  VectorXd m_next;         // d(potential)(g_{i+1})
  double residual = 0.0;   // momentum-matching residual after the solve
  std::vector<double> newton_residuals;
};

/// Residual of the momentum-matching equation at a candidate group step.
inline VectorXd group_step_residual(const LieGroupProblem& prob, const Point& u, const VectorXd& m,
                                    const VectorXd& p) {
  const double h = prob.step;
  return VectorXd(h * Ad_star(u, kinetic_diff(prob, u)) + 0.5 * h * m - p);
}

inline VariationalStep variational_step(const LieGroupProblem& prob, const Point& g,
                                        const VectorXd& p, int step_index = 0) {
  const int k = prob.group.dim();
  if (p.size() != k) throw std::invalid_argument("variational_step: momentum dimension mismatch");
  const Point e = identity_point(prob.group);
  const VectorXd m = potential_diff(prob, g);

  // Newton on algebra coordinates x with u = exp(hat(x)).
  VectorXd x = VectorXd::Zero(k);
  if (prob.so3_inertia && k == 3) {
    // First-order model: residual ~ (tr(J_d) I - J_d) x + h/2 m - p.
    const Matrix3d J_m =
        prob.so3_inertia->trace() * Matrix3d::Identity() - *prob.so3_inertia;
    x = J_m.ldlt().solve(VectorXd(p - 0.5 * prob.step * m));
  }

  VariationalStep out;
  const double tol = 1e-12 * std::max(1.0, p.norm());
  bool converged = false;
  for (int it = 0; it <= 50; ++it) {
    const Point u = retract(e, x);
    const VectorXd res = group_step_residual(prob, u, m, p);
    out.newton_residuals.push_back(res.norm());
    if (!res.allFinite()) break;
    if (res.norm() <= tol) {
      converged = true;
      break;
    }
    if (it == 50) break;
    const MatrixXd jac = detail::fd_differential_vec(
        [&](const Point& uu) { return group_step_residual(prob, uu, m, p); }, u);
    const VectorXd dx = jac.colPivHouseholderQr().solve(-res);
    if (!dx.allFinite()) break;
    // dx lives in the tangent at u; push the iterate through the retraction.
    x = local_coords(e, retract(u, dx));
  }
  if (!converged) {
    throw NewtonDivergence("variational_step: momentum equation did not converge (step size too "
                           "large?); last residual " +
                               std::to_string(out.newton_residuals.back()),
                           step_index);
  }

  const Point u = retract(e, x);
  out.control = u;
  out.state_next = group_mul(g, u);
  out.m = m;
  out.m_next = potential_diff(prob, out.state_next);
  out.residual = group_step_residual(prob, u, m, p).norm();
  // p_{i+1} = Ad*(u)(p_i - (h/2) m_i) - (h/2) m_{i+1}
  out.momentum_next = Ad_star(group_inv(u), VectorXd(p - 0.5 * prob.step * m)) -
                      0.5 * prob.step * out.m_next;
  return out;
}

struct IntegrationResult {
  std::vector<Point> states;      // g_0 .. g_N
  std::vector<Point> controls;    // u_0 .. u_{N-1}
  std::vector<VectorXd> momenta;  // incoming momentum per state; [0] is the seed
  std::vector<VectorXd> potential_diffs;  // m_i = d(potential)(g_i)
  std::vector<double> residuals;  // momentum-equation residual per step; [0] = 0
};

inline IntegrationResult integrate(const LieGroupProblem& prob, const Point& g0,
                                   const VectorXd& p_seed, int steps) {
  require_same_manifold(prob.group, g0.manifold(), "integrate");
  if (steps < 0) throw std::invalid_argument("integrate: negative step count");
  IntegrationResult out;
  out.states.push_back(g0);
  out.momenta.push_back(p_seed);
  out.potential_diffs.push_back(potential_diff(prob, g0));
  out.residuals.push_back(0.0);
  for (int i = 0; i < steps; ++i) {
    const VariationalStep s = variational_step(prob, out.states.back(), out.momenta.back(), i);
    out.controls.push_back(s.control);
    out.states.push_back(s.state_next);
    out.momenta.push_back(s.momentum_next);
    out.potential_diffs.push_back(s.m_next);
    out.residuals.push_back(s.residual);
  }
  return out;
}

// --------------------------------------------------------------------------
// Action sums as cost specifications

/// Running costs L_i(g, u) = h K(u) - (h/2) phi(g) - (h/2) phi(g u) with
/// analytic gradients; the terminal cost is zero.
inline CostSpec action_cost(const LieGroupProblem& prob, int n) {
  CostSpec cost;
  cost.terminal = [](const Point&) { return 0.0; };
  cost.terminal_grad = [d = prob.group.dim()](const Point&) {
    return VectorXd(VectorXd::Zero(d));
  };
  StageCost L;
  const double h = prob.step;
  L.value = [&prob, h](const Point& g, const Point& u) {
    return h * prob.kinetic(u) - 0.5 * h * potential_value(prob, g) -
           0.5 * h * potential_value(prob, group_mul(g, u));
  };
  L.grad_state = [&prob, h](const Point& g, const Point& u) {
    const Point gu = group_mul(g, u);
    return VectorXd(-0.5 * h * potential_diff(prob, g) -
                    0.5 * h * Ad_star(u, potential_diff(prob, gu)));
  };
  L.grad_control = [&prob, h](const Point& g, const Point& u) {
    const Point gu = group_mul(g, u);
    return VectorXd(h * kinetic_diff(prob, u) - 0.5 * h * potential_diff(prob, gu));
  };
  cost.running.assign(n, L);
  return cost;
}

/// Action sum plus the linear terminal cost whose differential at g_ref is
/// -p_ref; trajectories of the variational integrator are critical for this
/// cost with p_ref the final momentum (SO(3) only).
inline CostSpec action_cost_with_momentum(const LieGroupProblem& prob, int n, const Point& g_ref,
                                          const VectorXd& p_ref) {
  if (prob.group.kind() != Manifold::Kind::SO3) {
    throw std::invalid_argument("action_cost_with_momentum: SO(3) groups only");
  }
  CostSpec cost = action_cost(prob, n);
  cost.terminal = [g_ref, p_ref](const Point& g) { return -p_ref.dot(local_coords(g_ref, g)); };
  cost.terminal_grad = [g_ref, p_ref](const Point& g) {
    const Vector3d xi = local_coords(g_ref, g);
    return VectorXd(-so3::right_jacobian_inverse(xi).transpose() * p_ref);
  };
  return cost;
}

}  // namespace dgmp
