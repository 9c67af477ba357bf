#pragma once

/** State/mixed constraint machinery: max-type penalty functions and their
 * subdifferential generators, constraint qualifications (positive linear
 * independence of active gradients, strict normality, bounded slope), the
 * strong-decrease/distance certificates behind exact penalization, and
 * assembly of the constrained necessary-condition residuals with their
 * multipliers.
 *
 * Constraints follow the stagewise layout: smooth inequality maps
 * g_j(q_i, u_i) <= e and equality maps h_j(q_i, u_i) = e at interior stages
 * 1..n-1, plus terminal maps G_j(q_n) <= e, H_j(q_n) = e. The perturbation
 * vector e stacks one entry per constraint instance, interior stages first
 * (inequalities then equalities per stage), terminal block last.
 */

#include <dgmp/adjoint.hpp>
#include <dgmp/detail/small_lsq.hpp>

#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dgmp {

// --------------------------------------------------------------------------
// Constraint descriptions

struct ConstraintFunc {
  std::function<double(const Point&, const Point&)> value;
  std::function<VectorXd(const Point&, const Point&)> grad_state;    // optional -> FD
  std::function<VectorXd(const Point&, const Point&)> grad_control;  // optional -> FD
};

struct EndpointFunc {
  std::function<double(const Point&)> value;
  std::function<VectorXd(const Point&)> grad;  // optional -> FD
};

struct StageConstraints {
  std::vector<ConstraintFunc> ineq;
  std::vector<ConstraintFunc> eq;
};

struct ConstraintSet {
  std::vector<StageConstraints> stage;  // indexed by stage; entries 1..n-1 used
  std::vector<EndpointFunc> terminal_ineq;
  std::vector<EndpointFunc> terminal_eq;
  bool pure_state = false;  // constraints depend on the state only

  int horizon() const { return static_cast<int>(stage.size()); }

  int stage_count(int i) const {
    return static_cast<int>(stage[i].ineq.size() + stage[i].eq.size());
  }

  /// Offset of stage i's block in the perturbation vector.
  int e_offset(int i) const {
    int off = 0;
    for (int k = 1; k < i; ++k) off += stage_count(k);
    return off;
  }

  int e_offset_terminal() const { return e_offset(horizon()); }

  int perturbation_dim() const {
    return e_offset_terminal() +
           static_cast<int>(terminal_ineq.size() + terminal_eq.size());
  }

  bool empty() const {
    if (!terminal_ineq.empty() || !terminal_eq.empty()) return false;
    for (const auto& s : stage) {
      if (!s.ineq.empty() || !s.eq.empty()) return false;
    }
    return true;
  }
};

inline VectorXd constraint_grad_state(const ConstraintFunc& f, const Point& q, const Point& u) {
  if (f.grad_state) return f.grad_state(q, u);
  return detail::fd_point_gradient([&](const Point& x) { return f.value(x, u); }, q);
}

inline VectorXd constraint_grad_control(const ConstraintFunc& f, const Point& q, const Point& u) {
  if (f.grad_control) return f.grad_control(q, u);
  return detail::fd_point_gradient([&](const Point& x) { return f.value(q, x); }, u);
}

inline VectorXd endpoint_grad(const EndpointFunc& f, const Point& q) {
  if (f.grad) return f.grad(q);
  return detail::fd_point_gradient(f.value, q);
}

namespace detail {

inline void check_perturbation(const ConstraintSet& cons, const VectorXd& e) {
  if (e.size() != cons.perturbation_dim()) {
    throw std::invalid_argument("constraints: perturbation vector has length " +
                                std::to_string(e.size()) + ", expected " +
                                std::to_string(cons.perturbation_dim()));
  }
  (void)cons;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Max-type penalty

struct PenaltyValue {
  std::vector<double> per_stage;  // index 1..n-1 interior, index n terminal; slot 0 unused
  double total = 0.0;
};

/// phi_i(e, q, u) = max{0, g_j - e, |h_j - e|} per stage, summed into
/// P(e, u). Exactly zero iff the trajectory is feasible for perturbation e.
inline PenaltyValue penalty_eval(const ConstraintSet& cons, const VectorXd& e,
                                 const Trajectory& traj) {
  const int n = traj.horizon();
  if (cons.horizon() != n) {
    throw std::invalid_argument("penalty_eval: constraint horizon mismatch");
  }
  detail::check_perturbation(cons, e);
  PenaltyValue out;
  out.per_stage.assign(n + 1, 0.0);
  for (int i = 1; i <= n; ++i) {
    double phi = 0.0;
    if (i < n) {
      int off = cons.e_offset(i);
      for (const auto& g : cons.stage[i].ineq) {
        phi = std::max(phi, g.value(traj.states[i], traj.controls[i]) - e[off++]);
      }
      for (const auto& h : cons.stage[i].eq) {
        phi = std::max(phi, std::abs(h.value(traj.states[i], traj.controls[i]) - e[off++]));
      }
    } else {
      int off = cons.e_offset_terminal();
      for (const auto& g : cons.terminal_ineq) {
        phi = std::max(phi, g.value(traj.states[n]) - e[off++]);
      }
      for (const auto& h : cons.terminal_eq) {
        phi = std::max(phi, std::abs(h.value(traj.states[n]) - e[off++]));
      }
    }
    out.per_stage[i] = phi;
    out.total += phi;
  }
  return out;
}

// --------------------------------------------------------------------------
// Penalty subdifferential generators

struct PenaltyGenerator {
  VectorXd a;  // state covector part
  VectorXd b;  // control covector part (size 0 at the terminal stage)
  enum class Source { ZeroTerm, Inequality, EqualityPlus, EqualityMinus } source;
  int index = -1;  // position in its constraint list
};

struct PenaltyGenerators {
  double phi = 0.0;
  std::vector<PenaltyGenerator> gens;
};

/// Generators of the limiting subdifferential of the stage penalty: the
/// gradients of terms attaining the max within the tie tolerance (signed for
/// |h - e|), plus the zero generator when the max is attained by the 0 term.
/// Consumers take convex combinations.
inline PenaltyGenerators penalty_subgradient(const ConstraintSet& cons, const VectorXd& e,
                                             const Trajectory& traj, int stage_index,
                                             double tie_tol = 1e-9) {
  const int n = traj.horizon();
  if (stage_index < 1 || stage_index > n) {
    throw std::invalid_argument("penalty_subgradient: stage must be in 1..n");
  }
  detail::check_perturbation(cons, e);
  const PenaltyValue pv = penalty_eval(cons, e, traj);
  const double phi = pv.per_stage[stage_index];

  PenaltyGenerators out;
  out.phi = phi;
  const int dq = traj.states[stage_index].manifold().dim();

  if (phi <= tie_tol) {
    PenaltyGenerator zero;
    zero.a = VectorXd::Zero(dq);
    zero.b = stage_index < n
                 ? VectorXd(VectorXd::Zero(traj.controls[stage_index].manifold().dim()))
                 : VectorXd();
    zero.source = PenaltyGenerator::Source::ZeroTerm;
    out.gens.push_back(std::move(zero));
  }

  auto push = [&](VectorXd a, VectorXd b, PenaltyGenerator::Source src, int idx, double sign) {
    PenaltyGenerator g;
    g.a = sign * a;
    g.b = b.size() ? VectorXd(sign * b) : b;
    g.source = src;
    g.index = idx;
    out.gens.push_back(std::move(g));
  };

  if (stage_index < n) {
    const Point& q = traj.states[stage_index];
    const Point& u = traj.controls[stage_index];
    int off = cons.e_offset(stage_index);
    for (std::size_t j = 0; j < cons.stage[stage_index].ineq.size(); ++j) {
      const auto& g = cons.stage[stage_index].ineq[j];
      if (std::abs(g.value(q, u) - e[off + static_cast<int>(j)] - phi) <= tie_tol) {
        push(constraint_grad_state(g, q, u), constraint_grad_control(g, q, u),
             PenaltyGenerator::Source::Inequality, static_cast<int>(j), 1.0);
      }
    }
    off += static_cast<int>(cons.stage[stage_index].ineq.size());
    for (std::size_t j = 0; j < cons.stage[stage_index].eq.size(); ++j) {
      const auto& h = cons.stage[stage_index].eq[j];
      const double v = h.value(q, u) - e[off + static_cast<int>(j)];
      if (std::abs(std::abs(v) - phi) <= tie_tol) {
        if (v >= -tie_tol) {
          push(constraint_grad_state(h, q, u), constraint_grad_control(h, q, u),
               PenaltyGenerator::Source::EqualityPlus, static_cast<int>(j), 1.0);
        }
        if (v <= tie_tol) {
          push(constraint_grad_state(h, q, u), constraint_grad_control(h, q, u),
               PenaltyGenerator::Source::EqualityMinus, static_cast<int>(j), -1.0);
        }
      }
    }
  } else {
    const Point& qn = traj.states[n];
    int off = cons.e_offset_terminal();
    for (std::size_t j = 0; j < cons.terminal_ineq.size(); ++j) {
      const auto& g = cons.terminal_ineq[j];
      if (std::abs(g.value(qn) - e[off + static_cast<int>(j)] - phi) <= tie_tol) {
        push(endpoint_grad(g, qn), VectorXd(), PenaltyGenerator::Source::Inequality,
             static_cast<int>(j), 1.0);
      }
    }
    off += static_cast<int>(cons.terminal_ineq.size());
    for (std::size_t j = 0; j < cons.terminal_eq.size(); ++j) {
      const auto& h = cons.terminal_eq[j];
      const double v = h.value(qn) - e[off + static_cast<int>(j)];
      if (std::abs(std::abs(v) - phi) <= tie_tol) {
        if (v >= -tie_tol) {
          push(endpoint_grad(h, qn), VectorXd(), PenaltyGenerator::Source::EqualityPlus,
               static_cast<int>(j), 1.0);
        }
        if (v <= tie_tol) {
          push(endpoint_grad(h, qn), VectorXd(), PenaltyGenerator::Source::EqualityMinus,
               static_cast<int>(j), -1.0);
        }
      }
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// Positive linear independence of active gradients

struct LicqReport {
  bool regular = true;
  // Witness of degeneracy: a nonzero combination with lambda >= 0 on active
  // inequalities annihilating the gradients, |(lambda, mu)|_1 = 1.
  VectorXd witness_lambda;  // per active inequality (ordering in active_ineq)
  VectorXd witness_mu;      // per equality
  std::vector<int> active_ineq;
  double witness_residual = 0.0;
};

namespace detail {

/// Decide positive linear independence of the columns [G_act | H] where the
/// G coefficients are sign-constrained and the H coefficients are free.
/// The |.|_1 = 1 normalization is handled exactly by enumerating the sign
/// patterns of the free coefficients (no split-variable cancellation).
inline LicqReport positive_linear_independence(const MatrixXd& G_act, const MatrixXd& H,
                                               const std::vector<int>& active_idx) {
  LicqReport rep;
  rep.active_ineq = active_idx;
  const int na = static_cast<int>(G_act.cols());
  const int ns = static_cast<int>(H.cols());
  if (na + ns == 0) return rep;
  if (ns > 8) throw std::invalid_argument("licq_check: too many equality constraints");

  MatrixXd M(G_act.rows(), na + ns);
  if (na) M.leftCols(na) = G_act;
  if (ns) M.rightCols(ns) = H;
  const double scale = std::max(1.0, M.norm());

  // Fast path: full column rank already forces the zero solution.
  if (M.cols() <= M.rows()) {
    Eigen::JacobiSVD<MatrixXd> svd(M);
    if (svd.singularValues().minCoeff() >= 1e-8 * scale) return rep;
  }

  for (std::uint32_t mask = 0; mask < (1u << ns); ++mask) {
    MatrixXd A(M.rows(), na + ns);
    if (na) A.leftCols(na) = G_act;
    for (int j = 0; j < ns; ++j) {
      A.col(na + j) = (mask & (1u << j)) ? VectorXd(-H.col(j)) : VectorXd(H.col(j));
    }
    const auto sol = detail::min_norm_in_hull(A);
    const double res = std::sqrt(std::max(0.0, sol.objective));
    if (sol.feasible && res <= 1e-10 * scale) {
      rep.regular = false;
      rep.witness_residual = res;
      rep.witness_lambda = na ? VectorXd(sol.z.head(na)) : VectorXd();
      rep.witness_mu = VectorXd::Zero(ns);
      for (int j = 0; j < ns; ++j) {
        rep.witness_mu[j] = (mask & (1u << j)) ? -sol.z[na + j] : sol.z[na + j];
      }
      return rep;
    }
  }
  return rep;
}

}  // namespace detail

/// Checks the constraint qualification behind phi-regularity at a stage
/// (interior 1..n-1 or terminal n): the only (lambda >= 0, mu) with
/// sum lambda grad g + sum mu grad h = 0 and lambda supported on the active
/// set is zero. Returns an explicit witness otherwise.
inline LicqReport licq_check(const ConstraintSet& cons, const Trajectory& traj, int stage_index,
                             const VectorXd& e, double active_tol = 1e-6) {
  const int n = traj.horizon();
  detail::check_perturbation(cons, e);
  if (stage_index < 1 || stage_index > n) {
    throw std::invalid_argument("licq_check: stage must be in 1..n");
  }
  std::vector<int> active;
  std::vector<VectorXd> g_cols, h_cols;
  if (stage_index < n) {
    const Point& q = traj.states[stage_index];
    const Point& u = traj.controls[stage_index];
    int off = cons.e_offset(stage_index);
    for (std::size_t j = 0; j < cons.stage[stage_index].ineq.size(); ++j) {
      const auto& g = cons.stage[stage_index].ineq[j];
      if (g.value(q, u) - e[off + static_cast<int>(j)] >= -active_tol) {
        active.push_back(static_cast<int>(j));
        VectorXd col(q.manifold().dim() + u.manifold().dim());
        col << constraint_grad_state(g, q, u), constraint_grad_control(g, q, u);
        g_cols.push_back(col);
      }
    }
    for (const auto& h : cons.stage[stage_index].eq) {
      VectorXd col(q.manifold().dim() + u.manifold().dim());
      col << constraint_grad_state(h, q, u), constraint_grad_control(h, q, u);
      h_cols.push_back(col);
    }
  } else {
    const Point& qn = traj.states[n];
    int off = cons.e_offset_terminal();
    for (std::size_t j = 0; j < cons.terminal_ineq.size(); ++j) {
      if (cons.terminal_ineq[j].value(qn) - e[off + static_cast<int>(j)] >= -active_tol) {
        active.push_back(static_cast<int>(j));
        g_cols.push_back(endpoint_grad(cons.terminal_ineq[j], qn));
      }
    }
    for (const auto& h : cons.terminal_eq) h_cols.push_back(endpoint_grad(h, qn));
  }

  const int dim = g_cols.empty() ? (h_cols.empty() ? 1 : static_cast<int>(h_cols[0].size()))
                                 : static_cast<int>(g_cols[0].size());
  MatrixXd G(dim, g_cols.size()), H(dim, h_cols.size());
  for (std::size_t k = 0; k < g_cols.size(); ++k) G.col(k) = g_cols[k];
  for (std::size_t k = 0; k < h_cols.size(); ++k) H.col(k) = h_cols[k];
  return detail::positive_linear_independence(G, H, active);
}

// --------------------------------------------------------------------------
// Multipliers and assembled necessary conditions

struct MultiplierSequence {
  double lambda0 = 1.0;  // in {0, 1}
  // Indexed by stage (1..n-1 interior); slot n holds the terminal block.
  std::vector<VectorXd> ineq;  // lambda_{j,i} >= 0
  std::vector<VectorXd> eq;    // mu_{j,i}
};

inline MultiplierSequence zero_multipliers(const ConstraintSet& cons) {
  MultiplierSequence m;
  const int n = cons.horizon();
  m.ineq.assign(n + 1, VectorXd());
  m.eq.assign(n + 1, VectorXd());
  for (int i = 1; i < n; ++i) {
    m.ineq[i] = VectorXd::Zero(cons.stage[i].ineq.size());
    m.eq[i] = VectorXd::Zero(cons.stage[i].eq.size());
  }
  m.ineq[n] = VectorXd::Zero(cons.terminal_ineq.size());
  m.eq[n] = VectorXd::Zero(cons.terminal_eq.size());
  return m;
}

struct ConstrainedReport {
  std::vector<VectorXd> costates;           // p_0..p_n assembled from the recursion
  std::vector<VectorXd> stationarity;       // covector per stage 0..n-1
  std::vector<double> stationarity_delta;   // cone-projected norms
  double max_stationarity_delta = 0.0;
  double max_slackness_violation = 0.0;
  double lambda0 = 1.0;
  bool degenerate = false;  // lambda0 == 0 with nonzero multipliers
};

/// Assembles the constrained first-order conditions for given multipliers:
///   p_n = -lambda0 dl - sum lambda dG - sum mu dH,
///   p_{i-1} = -lambda0 d_qL - sum lambda d_q g - sum mu d_q h + D_qF* p_i,
/// and reports per-stage stationarity residuals
///   || P_cone(-(lambda0 d_uL + sum lambda d_u g + sum mu d_u h - D_uF* p)) ||
/// together with complementary-slackness violations. With zero multipliers
/// and lambda0 = 1 this reduces exactly to the unconstrained certificate.
inline ConstrainedReport constrained_conditions_residual(const ControlSystem& sys,
                                                         const Trajectory& traj,
                                                         const CostSpec& cost,
                                                         const ConstraintSet& cons,
                                                         const MultiplierSequence& mult,
                                                         const VectorXd& e) {
  const int n = sys.horizon();
  if (cons.horizon() != n) {
    throw std::invalid_argument("constrained_conditions_residual: horizon mismatch");
  }
  detail::check_perturbation(cons, e);
  if (mult.lambda0 != 0.0 && mult.lambda0 != 1.0) {
    throw std::invalid_argument("constrained_conditions_residual: lambda0 must be 0 or 1");
  }
  for (int i = 1; i <= n; ++i) {
    if ((mult.ineq[i].array() < -1e-12).any()) {
      throw std::invalid_argument("constrained_conditions_residual: negative lambda at stage " +
                                  std::to_string(i));
    }
  }

  ConstrainedReport rep;
  rep.lambda0 = mult.lambda0;

  // Cost covectors a_i with the multiplier terms folded in.
  std::vector<VectorXd> a(n + 1);
  for (int i = 0; i < n; ++i) {
    VectorXd ai = VectorXd::Zero(sys.state.dim());
    if (mult.lambda0 != 0.0) {
      ai += mult.lambda0 *
            stage_cost_grad_state(cost.running[i], traj.states[i], traj.controls[i]);
    }
    if (i >= 1) {
      for (std::size_t j = 0; j < cons.stage[i].ineq.size(); ++j) {
        if (mult.ineq[i][j] != 0.0) {
          ai += mult.ineq[i][j] *
                constraint_grad_state(cons.stage[i].ineq[j], traj.states[i], traj.controls[i]);
        }
      }
      for (std::size_t j = 0; j < cons.stage[i].eq.size(); ++j) {
        if (mult.eq[i][j] != 0.0) {
          ai += mult.eq[i][j] *
                constraint_grad_state(cons.stage[i].eq[j], traj.states[i], traj.controls[i]);
        }
      }
    }
    a[i] = ai;
  }
  VectorXd an = VectorXd::Zero(sys.state.dim());
  if (mult.lambda0 != 0.0) an += mult.lambda0 * terminal_gradient(cost, traj.states[n]);
  for (std::size_t j = 0; j < cons.terminal_ineq.size(); ++j) {
    if (mult.ineq[n][j] != 0.0) {
      an += mult.ineq[n][j] * endpoint_grad(cons.terminal_ineq[j], traj.states[n]);
    }
  }
  for (std::size_t j = 0; j < cons.terminal_eq.size(); ++j) {
    if (mult.eq[n][j] != 0.0) {
      an += mult.eq[n][j] * endpoint_grad(cons.terminal_eq[j], traj.states[n]);
    }
  }
  a[n] = an;

  rep.costates = detail::costate_recursion(sys, traj, a);

  rep.stationarity.resize(n);
  rep.stationarity_delta.resize(n);
  for (int i = 0; i < n; ++i) {
    VectorXd s = VectorXd::Zero(sys.stages[i].control.dim());
    if (mult.lambda0 != 0.0) {
      s += mult.lambda0 *
           stage_cost_grad_control(cost.running[i], traj.states[i], traj.controls[i]);
    }
    if (i >= 1) {
      for (std::size_t j = 0; j < cons.stage[i].ineq.size(); ++j) {
        if (mult.ineq[i][j] != 0.0) {
          s += mult.ineq[i][j] *
               constraint_grad_control(cons.stage[i].ineq[j], traj.states[i], traj.controls[i]);
        }
      }
      for (std::size_t j = 0; j < cons.stage[i].eq.size(); ++j) {
        if (mult.eq[i][j] != 0.0) {
          s += mult.eq[i][j] *
               constraint_grad_control(cons.stage[i].eq[j], traj.states[i], traj.controls[i]);
        }
      }
    }
    const MatrixXd ju = stage_jac_control(sys.stages[i], traj.states[i], traj.controls[i]);
    s -= ju.transpose() * rep.costates[i + 1];
    rep.stationarity[i] = s;
    rep.stationarity_delta[i] =
        tangent_cone_project(sys.control_sets[i], traj.controls[i], VectorXd(-s)).norm();
    rep.max_stationarity_delta = std::max(rep.max_stationarity_delta, rep.stationarity_delta[i]);
  }

  // Complementary slackness on the inequalities.
  for (int i = 1; i <= n; ++i) {
    int off = i < n ? cons.e_offset(i) : cons.e_offset_terminal();
    const auto count = i < n ? cons.stage[i].ineq.size() : cons.terminal_ineq.size();
    for (std::size_t j = 0; j < count; ++j) {
      const double gv = i < n
                            ? cons.stage[i].ineq[j].value(traj.states[i], traj.controls[i])
                            : cons.terminal_ineq[j].value(traj.states[n]);
      rep.max_slackness_violation =
          std::max(rep.max_slackness_violation,
                   std::abs(mult.ineq[i][j] * (gv - e[off + static_cast<int>(j)])));
    }
  }

  double mult_norm = 0.0;
  for (int i = 1; i <= n; ++i) mult_norm += mult.ineq[i].lpNorm<1>() + mult.eq[i].lpNorm<1>();
  rep.degenerate = (mult.lambda0 == 0.0) && mult_norm > 0.0;
  return rep;
}

// --------------------------------------------------------------------------
// Linear structure of the conditions in the multipliers

namespace detail {

/// One column per active multiplier: its contribution to every stationarity
/// covector through the homogeneous costate recursion (Thm 2.2 signs).
struct MultiplierColumns {
  struct Entry {
    int stage;   // 1..n-1 interior, n terminal
    bool is_eq;  // equality vs inequality
    int index;   // position in its list
  };
  std::vector<Entry> entries;
  std::vector<std::vector<VectorXd>> stationarity;  // [k][i] covector at stage i
};

inline MultiplierColumns multiplier_columns(const ControlSystem& sys, const Trajectory& traj,
                                            const ConstraintSet& cons,
                                            const std::vector<std::vector<int>>& active_ineq) {
  const int n = sys.horizon();
  MultiplierColumns cols;

  std::vector<MatrixXd> jq(n), ju(n);
  for (int i = 0; i < n; ++i) {
    jq[i] = stage_jac_state(sys.stages[i], traj.states[i], traj.controls[i]);
    ju[i] = stage_jac_control(sys.stages[i], traj.states[i], traj.controls[i]);
  }

  auto add_column = [&](int stage, bool is_eq, int index) {
    // State/control gradients of this single constraint.
    std::vector<VectorXd> a(n + 1, VectorXd::Zero(sys.state.dim()));
    VectorXd b_own;
    if (stage < n) {
      const auto& f = is_eq ? cons.stage[stage].eq[index] : cons.stage[stage].ineq[index];
      a[stage] = constraint_grad_state(f, traj.states[stage], traj.controls[stage]);
      b_own = constraint_grad_control(f, traj.states[stage], traj.controls[stage]);
    } else {
      const auto& f = is_eq ? cons.terminal_eq[index] : cons.terminal_ineq[index];
      a[n] = endpoint_grad(f, traj.states[n]);
    }
    // Homogeneous recursion p_n = -a_n, p_{i-1} = -a_{i-1} + D_qF* p_i.
    std::vector<VectorXd> p(n + 1);
    p[n] = -a[n];
    for (int i = n; i >= 1; --i) p[i - 1] = -a[i - 1] + jq[i - 1].transpose() * p[i];
    std::vector<VectorXd> s(n);
    for (int i = 0; i < n; ++i) {
      s[i] = -(ju[i].transpose() * p[i + 1]);
      if (stage == i && stage < n) s[i] += b_own;
    }
    cols.entries.push_back({stage, is_eq, index});
    cols.stationarity.push_back(std::move(s));
  };

  for (int i = 1; i < n; ++i) {
    for (int j : active_ineq[i]) add_column(i, false, j);
    for (std::size_t j = 0; j < cons.stage[i].eq.size(); ++j) {
      add_column(i, true, static_cast<int>(j));
    }
  }
  for (int j : active_ineq[n]) add_column(n, false, j);
  for (std::size_t j = 0; j < cons.terminal_eq.size(); ++j) {
    add_column(n, true, static_cast<int>(j));
  }
  return cols;
}

inline std::vector<std::vector<int>> active_inequalities(const ConstraintSet& cons,
                                                         const Trajectory& traj, const VectorXd& e,
                                                         double active_tol) {
  const int n = traj.horizon();
  std::vector<std::vector<int>> act(n + 1);
  for (int i = 1; i < n; ++i) {
    int off = cons.e_offset(i);
    for (std::size_t j = 0; j < cons.stage[i].ineq.size(); ++j) {
      if (cons.stage[i].ineq[j].value(traj.states[i], traj.controls[i]) -
              e[off + static_cast<int>(j)] >=
          -active_tol) {
        act[i].push_back(static_cast<int>(j));
      }
    }
  }
  int off = cons.e_offset_terminal();
  for (std::size_t j = 0; j < cons.terminal_ineq.size(); ++j) {
    if (cons.terminal_ineq[j].value(traj.states[n]) - e[off + static_cast<int>(j)] >=
        -active_tol) {
      act[n].push_back(static_cast<int>(j));
    }
  }
  return act;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Strict normality

struct NormalityReport {
  bool strictly_normal = true;
  MultiplierSequence witness;         // lambda0 = 0 certificate when abnormal
  std::vector<VectorXd> costates;     // homogeneous costates of the witness
  double residual = 0.0;              // norm of the assembled homogeneous system
};

/// Decides strict normality at a feasible trajectory: the homogeneous system
///   -p_n = a_n,  p_{i-1} = a_{i-1} - D_qF* p_i,
///   <b_i - D_uF* p_{i+1}, v> >= 0 on the control tangent cones,
/// with (a_i, b_i) ranging over conic combinations of active constraint
/// gradients, admits only the zero solution. Decided by exact linear
/// feasibility over the normalized multiplier simplex.
inline NormalityReport strict_normality_check(const ControlSystem& sys, const Trajectory& traj,
                                              const ConstraintSet& cons, const VectorXd& e,
                                              double active_tol = 1e-6) {
  const int n = sys.horizon();
  detail::check_perturbation(cons, e);
  const PenaltyValue pv = penalty_eval(cons, e, traj);
  if (pv.total > 1e-7) {
    throw std::invalid_argument("strict_normality_check: trajectory is infeasible (P = " +
                                std::to_string(pv.total) + ")");
  }

  NormalityReport rep;
  const auto active = detail::active_inequalities(cons, traj, e, active_tol);

  // Multiplier variables: lambda >= 0 per active inequality, mu = mu+ - mu-
  // per equality. All sign-constrained after splitting; the equalities and
  // inequalities of the stationarity rows are handled below.
  std::vector<MatrixXd> jq(n), ju(n);
  for (int i = 0; i < n; ++i) {
    jq[i] = stage_jac_state(sys.stages[i], traj.states[i], traj.controls[i]);
    ju[i] = stage_jac_control(sys.stages[i], traj.states[i], traj.controls[i]);
  }

  struct Var {
    int stage;
    bool is_eq;
    int index;
  };
  std::vector<Var> vars;
  std::vector<int> eq_vars;  // positions of the equality variables
  for (int i = 1; i <= n; ++i) {
    const bool terminal = i == n;
    for (int j : active[i]) vars.push_back({i, false, j});
    const std::size_t eq_count = terminal ? cons.terminal_eq.size() : cons.stage[i].eq.size();
    for (std::size_t j = 0; j < eq_count; ++j) {
      eq_vars.push_back(static_cast<int>(vars.size()));
      vars.push_back({i, true, static_cast<int>(j)});
    }
  }
  if (vars.empty()) return rep;  // no constraints anywhere: only zero sequences
  if (eq_vars.size() > 8) {
    throw std::invalid_argument("strict_normality_check: too many equality constraints");
  }

  // Stationarity covector and costates of each unit multiplier via the
  // Def. 4.13 recursion p_n = -a_n, p_{i-1} = a_{i-1} - D_qF* p_i.
  const int nv = static_cast<int>(vars.size());
  std::vector<std::vector<VectorXd>> s_cols, p_cols;
  for (const Var& v : vars) {
    std::vector<VectorXd> a(n + 1, VectorXd::Zero(sys.state.dim()));
    VectorXd b_own;
    if (v.stage < n) {
      const auto& f = v.is_eq ? cons.stage[v.stage].eq[v.index] : cons.stage[v.stage].ineq[v.index];
      a[v.stage] = constraint_grad_state(f, traj.states[v.stage], traj.controls[v.stage]);
      b_own = constraint_grad_control(f, traj.states[v.stage], traj.controls[v.stage]);
    } else {
      const auto& f = v.is_eq ? cons.terminal_eq[v.index] : cons.terminal_ineq[v.index];
      a[n] = endpoint_grad(f, traj.states[n]);
    }
    std::vector<VectorXd> p(n + 1);
    p[n] = -a[n];
    for (int i = n; i >= 1; --i) p[i - 1] = a[i - 1] - jq[i - 1].transpose() * p[i];
    std::vector<VectorXd> s(n);
    for (int i = 0; i < n; ++i) {
      s[i] = -(ju[i].transpose() * p[i + 1]);
      if (v.stage == i) s[i] += b_own;
    }
    s_cols.push_back(std::move(s));
    p_cols.push_back(std::move(p));
  }

  // Assemble rows. Whole-space cones force equality rows; cones with
  // halfspace normals N require b - D_uF* p in the nonnegative span of N,
  // encoded with slack variables outside the normalization.
  std::vector<TangentCone> cones;
  int eq_rows = 0, slack_count = 0;
  for (int i = 0; i < n; ++i) {
    cones.push_back(sys.control_sets[i].tangent_cone(traj.controls[i]));
    eq_rows += sys.stages[i].control.dim();
    slack_count += static_cast<int>(cones.back().normals.size());
  }

  MatrixXd A_base = MatrixXd::Zero(eq_rows, nv + slack_count);
  int row = 0, slack = 0;
  for (int i = 0; i < n; ++i) {
    const int m = sys.stages[i].control.dim();
    for (int k = 0; k < nv; ++k) A_base.block(row, k, m, 1) = s_cols[k][i];
    for (const VectorXd& normal : cones[i].normals) {
      A_base.block(row, nv + slack, m, 1) = normal;
      ++slack;
    }
    row += m;
  }

  double scale = 1.0;
  for (const auto& s : s_cols) {
    for (const auto& v : s) scale = std::max(scale, v.norm());
  }

  // |(lambda, mu)|_1 = 1 exactly: enumerate the sign patterns of the free
  // equality multipliers, all variables nonnegative within a pattern.
  for (std::uint32_t mask = 0; mask < (1u << eq_vars.size()); ++mask) {
    MatrixXd A = A_base;
    std::vector<double> sign(nv, 1.0);
    for (std::size_t j = 0; j < eq_vars.size(); ++j) {
      if (mask & (1u << j)) {
        sign[eq_vars[j]] = -1.0;
        A.col(eq_vars[j]) *= -1.0;
      }
    }
    detail::LsqProblem prob;
    prob.A = A;
    prob.c = VectorXd::Zero(eq_rows);
    prob.nonneg.assign(nv + slack_count, true);
    prob.E = MatrixXd::Zero(1, nv + slack_count);
    prob.E.leftCols(nv).setOnes();
    prob.d = VectorXd::Ones(1);
    const auto sol = detail::solve_small_lsq(prob);
    if (!sol.feasible || std::sqrt(std::max(0.0, sol.objective)) > 1e-10 * scale) continue;

    rep.strictly_normal = false;
    rep.residual = std::sqrt(std::max(0.0, sol.objective));
    rep.witness = zero_multipliers(cons);
    rep.witness.lambda0 = 0.0;
    rep.costates.assign(n + 1, VectorXd::Zero(sys.state.dim()));
    for (int k = 0; k < nv; ++k) {
      const Var& v = vars[k];
      const double value = sign[k] * sol.z[k];
      if (value == 0.0) continue;
      if (v.is_eq) {
        rep.witness.eq[v.stage][v.index] = value;
      } else {
        rep.witness.ineq[v.stage][v.index] = value;
      }
      for (int i = 0; i <= n; ++i) rep.costates[i] += value * p_cols[k][i];
    }
    return rep;
  }
  return rep;
}

// --------------------------------------------------------------------------
// Bounded slope

struct BoundedSlopeReport {
  bool pass = true;
  double worst_ratio = 0.0;  // infinity encoded by pass = false with ratio < 0
  int worst_stage = -1;
};

/// Checks the bounded-slope condition ||b|| <= kappa ||a|| over the stage
/// constraint gradients and random convex combinations of them.
inline BoundedSlopeReport bounded_slope_check(const ConstraintSet& cons, const Trajectory& traj,
                                              double kappa, int samples = 1000,
                                              unsigned seed = 0) {
  const int n = traj.horizon();
  BoundedSlopeReport rep;
  std::mt19937_64 rng(seed);
  auto uniform01 = [&rng]() { return (rng() >> 11) * 0x1.0p-53; };

  for (int i = 1; i < n; ++i) {
    std::vector<std::pair<VectorXd, VectorXd>> gens;
    const Point& q = traj.states[i];
    const Point& u = traj.controls[i];
    for (const auto& g : cons.stage[i].ineq) {
      gens.emplace_back(constraint_grad_state(g, q, u), constraint_grad_control(g, q, u));
    }
    for (const auto& h : cons.stage[i].eq) {
      const VectorXd a = constraint_grad_state(h, q, u);
      const VectorXd b = constraint_grad_control(h, q, u);
      gens.emplace_back(a, b);
      gens.emplace_back(-a, -b);
    }
    if (gens.empty()) continue;

    auto consider = [&](const VectorXd& a, const VectorXd& b) {
      const double an = a.norm(), bn = b.norm();
      if (an < 1e-12 && bn < 1e-12) return;
      if (an < 1e-12) {
        rep.pass = false;
        rep.worst_ratio = std::numeric_limits<double>::infinity();
        rep.worst_stage = i;
        return;
      }
      const double ratio = bn / an;
      if (ratio > rep.worst_ratio) {
        rep.worst_ratio = ratio;
        rep.worst_stage = i;
      }
    };

    for (const auto& [a, b] : gens) consider(a, b);
    for (int k = 0; k < samples; ++k) {
      VectorXd w(gens.size());
      for (int j = 0; j < w.size(); ++j) w[j] = uniform01();
      const double total = w.sum();
      if (total <= 0.0) continue;
      w /= total;
      VectorXd a = VectorXd::Zero(gens[0].first.size());
      VectorXd b = VectorXd::Zero(gens[0].second.size());
      for (std::size_t j = 0; j < gens.size(); ++j) {
        a += w[static_cast<int>(j)] * gens[j].first;
        b += w[static_cast<int>(j)] * gens[j].second;
      }
      consider(a, b);
    }
  }
  if (rep.pass) rep.pass = rep.worst_ratio <= kappa;
  return rep;
}

// --------------------------------------------------------------------------
// Multiplier assembly

struct MultiplierAssembly {
  enum class Status { Normal, Degenerate, NoCertificate };
  Status status = Status::Normal;
  MultiplierSequence multipliers;
  double residual = 0.0;  // max cone-projected stationarity residual
};

/// Recovers multipliers certifying the constrained first-order conditions at
/// an (approximately) feasible, (approximately) stationary trajectory:
/// nonnegative least squares over the active set with lambda0 = 1, falling
/// back to the normalized homogeneous system (lambda0 = 0) when the normal
/// branch cannot reach the tolerance.
inline MultiplierAssembly assemble_multipliers(const ControlSystem& sys, const Trajectory& traj,
                                               const CostSpec& cost, const ConstraintSet& cons,
                                               const VectorXd& e, double residual_tol = 1e-6,
                                               double active_tol = 1e-6) {
  const int n = sys.horizon();
  MultiplierAssembly out;
  out.multipliers = zero_multipliers(cons);

  const auto active = detail::active_inequalities(cons, traj, e, active_tol);
  const auto cols = detail::multiplier_columns(sys, traj, cons, active);
  const int nv = static_cast<int>(cols.entries.size());

  // Base residuals: the unconstrained reduced gradient (lambda0 = 1 terms).
  const std::vector<VectorXd> base = cost_gradient(sys, cost, traj);

  int total_rows = 0;
  for (int i = 0; i < n; ++i) total_rows += sys.stages[i].control.dim();

  if (nv > 0) {
    MatrixXd A(total_rows, nv);
    VectorXd c(total_rows);
    int row = 0;
    for (int i = 0; i < n; ++i) {
      const int m = sys.stages[i].control.dim();
      for (int k = 0; k < nv; ++k) A.block(row, k, m, 1) = cols.stationarity[k][i];
      c.segment(row, m) = -base[i];
      row += m;
    }
    detail::LsqProblem prob;
    prob.A = A;
    prob.c = c;
    prob.nonneg.assign(nv, false);
    for (int k = 0; k < nv; ++k) prob.nonneg[k] = !cols.entries[k].is_eq;
    const auto sol = detail::solve_small_lsq(prob);
    if (sol.feasible) {
      for (int k = 0; k < nv; ++k) {
        const auto& entry = cols.entries[k];
        if (entry.is_eq) {
          out.multipliers.eq[entry.stage][entry.index] = sol.z[k];
        } else {
          out.multipliers.ineq[entry.stage][entry.index] = sol.z[k];
        }
      }
    }
  }
  out.multipliers.lambda0 = 1.0;
  const ConstrainedReport rep =
      constrained_conditions_residual(sys, traj, cost, cons, out.multipliers, e);
  out.residual = rep.max_stationarity_delta;
  if (out.residual <= residual_tol) {
    out.status = MultiplierAssembly::Status::Normal;
    return out;
  }

  // Degenerate branch: lambda0 = 0 with |(lambda, mu)|_1 = 1.
  const NormalityReport norm = strict_normality_check(sys, traj, cons, e, active_tol);
  if (!norm.strictly_normal) {
    out.status = MultiplierAssembly::Status::Degenerate;
    out.multipliers = norm.witness;
    out.residual = norm.residual;
    return out;
  }
  out.status = MultiplierAssembly::Status::NoCertificate;
  return out;
}

// --------------------------------------------------------------------------
// Strong decrease and the distance bound

struct DecreaseReport {
  bool decrease_ok = true;
  bool distance_bound_ok = true;
  int infeasible_samples = 0;
  double worst_dini_margin = -std::numeric_limits<double>::infinity();
  double worst_distance_margin = -std::numeric_limits<double>::infinity();
  std::string counterexample;
};

namespace detail {

/// One selected subgradient of P pulled back to the controls through the
/// adjoint recursion (argmax generator per stage).
inline std::vector<VectorXd> penalty_reduced_subgradient(const ControlSystem& sys,
                                                         const ConstraintSet& cons,
                                                         const VectorXd& e,
                                                         const Trajectory& traj) {
  const int n = sys.horizon();
  std::vector<VectorXd> a(n + 1, VectorXd::Zero(sys.state.dim()));
  std::vector<VectorXd> b(n);
  for (int i = 0; i < n; ++i) b[i] = VectorXd::Zero(sys.stages[i].control.dim());
  for (int i = 1; i <= n; ++i) {
    const PenaltyGenerators gens = penalty_subgradient(cons, e, traj, i);
    if (gens.phi <= 0.0 || gens.gens.empty()) continue;
    const PenaltyGenerator& pick = gens.gens.front();
    a[i] += pick.a;
    if (i < n && pick.b.size()) b[i] += pick.b;
  }
  const std::vector<VectorXd> p = costate_recursion(sys, traj, a);
  std::vector<VectorXd> r(n);
  for (int i = 0; i < n; ++i) {
    const MatrixXd ju = stage_jac_control(sys.stages[i], traj.states[i], traj.controls[i]);
    r[i] = b[i] - ju.transpose() * p[i + 1];
  }
  return r;
}

}  // namespace detail

/// Samples (e, u) near a feasible base pair and checks the strong decrease
/// condition (every sampled infeasible point admits a tangent-cone direction
/// along which the penalty decreases at rate Delta) together with the
/// distance bound d_A(e)(u) <= P(e, u) / Delta. The distance oracle receives
/// the stacked control coordinates and the active perturbation.
inline DecreaseReport decrease_certificate(
    const ControlSystem& sys, const ConstraintSet& cons, const VectorXd& e0,
    const Trajectory& traj0, double radius, double delta,
    const std::function<double(const std::vector<Point>&, const VectorXd&)>& distance_oracle =
        nullptr,
    int samples = 40, int directions = 64, unsigned seed = 1) {
  const int n = sys.horizon();
  detail::check_perturbation(cons, e0);
  if (penalty_eval(cons, e0, traj0).total > 1e-12) {
    throw std::invalid_argument("decrease_certificate: base trajectory must be feasible");
  }
  DecreaseReport rep;
  if (cons.empty()) return rep;  // vacuous

  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) { return lo + (hi - lo) * (rng() >> 11) * 0x1.0p-53; };

  for (int s = 0; s < samples; ++s) {
    VectorXd e = e0;
    for (int k = 0; k < e.size(); ++k) e[k] += uniform(-radius, radius);
    std::vector<Point> u;
    for (int i = 0; i < n; ++i) {
      VectorXd step(sys.stages[i].control.dim());
      for (int k = 0; k < step.size(); ++k) step[k] = uniform(-radius, radius);
      u.push_back(sys.control_sets[i].project(retract(traj0.controls[i], step)));
    }
    Trajectory traj = rollout(sys, traj0.states[0], u);
    const double P = penalty_eval(cons, e, traj).total;
    if (P <= 1e-12) continue;
    ++rep.infeasible_samples;

    // Candidate directions: the reduced-subgradient descent direction plus
    // random cone directions.
    std::vector<std::vector<VectorXd>> candidates;
    {
      const auto r = detail::penalty_reduced_subgradient(sys, cons, e, traj);
      std::vector<VectorXd> v(n);
      for (int i = 0; i < n; ++i) {
        v[i] = tangent_cone_project(sys.control_sets[i], u[i], VectorXd(-r[i]));
      }
      candidates.push_back(std::move(v));
    }
    for (int d = 0; d < directions; ++d) {
      std::vector<VectorXd> v(n);
      for (int i = 0; i < n; ++i) {
        VectorXd w(sys.stages[i].control.dim());
        for (int k = 0; k < w.size(); ++k) w[k] = uniform(-1.0, 1.0);
        v[i] = tangent_cone_project(sys.control_sets[i], u[i], w);
      }
      candidates.push_back(std::move(v));
    }

    double best_rate = std::numeric_limits<double>::infinity();
    for (const auto& v : candidates) {
      double norm_sq = 0.0;
      for (const auto& vi : v) norm_sq += vi.squaredNorm();
      const double vnorm = std::sqrt(norm_sq);
      if (vnorm < 1e-12) continue;
      // Forward-quotient Dini surrogate along the projected direction.
      double dini = std::numeric_limits<double>::infinity();
      for (double lam : {1e-2, 1e-3, 1e-4, 1e-5, 1e-6}) {
        std::vector<Point> u_lam;
        for (int i = 0; i < n; ++i) u_lam.push_back(retract(u[i], VectorXd(lam * v[i])));
        const double Pl = penalty_eval(cons, e, rollout(sys, traj0.states[0], u_lam)).total;
        dini = std::min(dini, (Pl - P) / lam);
      }
      best_rate = std::min(best_rate, dini / vnorm);
    }
    const double margin = best_rate + delta;  // want best_rate <= -delta
    rep.worst_dini_margin = std::max(rep.worst_dini_margin, margin);
    if (margin > 1e-6 * std::max(1.0, delta)) {
      rep.decrease_ok = false;
      rep.counterexample = "no decrease direction at sample " + std::to_string(s);
    }

    if (distance_oracle) {
      const double dist = distance_oracle(u, e);
      const double dmargin = dist - P / delta;
      rep.worst_distance_margin = std::max(rep.worst_distance_margin, dmargin);
      if (dmargin > 1e-9) {
        rep.distance_bound_ok = false;
        if (rep.counterexample.empty()) {
          rep.counterexample = "distance bound violated at sample " + std::to_string(s);
        }
      }
    }
  }
  return rep;
}

}  // namespace dgmp
