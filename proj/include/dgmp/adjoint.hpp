#pragma once

/** Backward costate sweep, reduced cost gradients, criticality certificates,
 * and the initial-state-as-control extension.
 *
 * Costs are C1: terminal l(q_n), running L_i(q_i, u_i), and an optional
 * initial cost kappa(q_0) used by the extension. Gradients may be supplied
 * analytically; otherwise they are produced by central finite differences
 * through retractions.
 */

#include <dgmp/system.hpp>

#include <functional>
#include <optional>
#include <vector>

namespace dgmp {

// --------------------------------------------------------------------------
// Cost specifications

struct StageCost {
  std::function<double(const Point&, const Point&)> value;
  std::function<VectorXd(const Point&, const Point&)> grad_state;    // optional
  std::function<VectorXd(const Point&, const Point&)> grad_control;  // optional
  bool convex_in_control = false;
};

struct CostSpec {
  std::function<double(const Point&)> terminal;
  std::function<VectorXd(const Point&)> terminal_grad;  // optional
  std::vector<StageCost> running;
  std::function<double(const Point&)> initial;       // optional kappa(q_0)
  std::function<VectorXd(const Point&)> initial_grad;  // optional
};

namespace detail {

inline VectorXd fd_point_gradient(const std::function<double(const Point&)>& f, const Point& x,
                                  double step = kFdStep) {
  const int d = x.manifold().dim();
  VectorXd g(d);
  for (int k = 0; k < d; ++k) {
    VectorXd e = VectorXd::Zero(d);
    e[k] = step;
    g[k] = (f(retract(x, e)) - f(retract(x, VectorXd(-e)))) / (2.0 * step);
  }
  return g;
}

}  // namespace detail

inline VectorXd terminal_gradient(const CostSpec& cost, const Point& qn) {
  if (cost.terminal_grad) return cost.terminal_grad(qn);
  return detail::fd_point_gradient(cost.terminal, qn);
}

inline VectorXd initial_gradient(const CostSpec& cost, const Point& q0) {
  if (!cost.initial) throw std::invalid_argument("initial_gradient: cost has no initial term");
  if (cost.initial_grad) return cost.initial_grad(q0);
  return detail::fd_point_gradient(cost.initial, q0);
}

inline VectorXd stage_cost_grad_state(const StageCost& L, const Point& q, const Point& u) {
  if (L.grad_state) return L.grad_state(q, u);
  return detail::fd_point_gradient([&](const Point& x) { return L.value(x, u); }, q);
}

inline VectorXd stage_cost_grad_control(const StageCost& L, const Point& q, const Point& u) {
  if (L.grad_control) return L.grad_control(q, u);
  return detail::fd_point_gradient([&](const Point& x) { return L.value(q, x); }, u);
}

inline double total_cost(const CostSpec& cost, const Trajectory& traj) {
  if (cost.running.size() != traj.controls.size()) {
    throw std::invalid_argument("total_cost: running-cost count does not match horizon");
  }
  double j = cost.initial ? cost.initial(traj.states.front()) : 0.0;
  for (std::size_t i = 0; i < traj.controls.size(); ++i) {
    j += cost.running[i].value(traj.states[i], traj.controls[i]);
  }
  return j + cost.terminal(traj.states.back());
}

// --------------------------------------------------------------------------
// Backward sweep

/// Costates p_0..p_n with the cost covectors that generated them:
/// a_i = d_q L_i (a_n the terminal gradient), b_i = d_u L_i.
struct CostateSequence {
  std::vector<VectorXd> p;  // index i = costate at states[i]; p[0] included
  std::vector<VectorXd> a;  // a[0..n]
  std::vector<VectorXd> b;  // b[0..n-1]
};

namespace detail {

/// Shared recursion core: p_n = -a_n, p_{i-1} = -a_{i-1} + D_qF_{i-1}^* p_i.
inline std::vector<VectorXd> costate_recursion(const ControlSystem& sys, const Trajectory& traj,
                                               const std::vector<VectorXd>& a) {
  const int n = sys.horizon();
  std::vector<VectorXd> p(n + 1);
  p[n] = -a[n];
  for (int i = n; i >= 1; --i) {
    const MatrixXd jq = stage_jac_state(sys.stages[i - 1], traj.states[i - 1], traj.controls[i - 1]);
    p[i - 1] = -a[i - 1] + jq.transpose() * p[i];
  }
  return p;
}

}  // namespace detail

inline CostateSequence backward_sweep(const ControlSystem& sys, const CostSpec& cost,
                                      const Trajectory& traj) {
  validate_trajectory(sys, traj);
  const int n = sys.horizon();
  if (static_cast<int>(cost.running.size()) != n) {
    throw std::invalid_argument("backward_sweep: running-cost count does not match horizon");
  }
  CostateSequence seq;
  seq.a.resize(n + 1);
  seq.b.resize(n);
  for (int i = 0; i < n; ++i) {
    seq.a[i] = stage_cost_grad_state(cost.running[i], traj.states[i], traj.controls[i]);
    seq.b[i] = stage_cost_grad_control(cost.running[i], traj.states[i], traj.controls[i]);
  }
  seq.a[n] = terminal_gradient(cost, traj.states[n]);
  seq.p = detail::costate_recursion(sys, traj, seq.a);
  return seq;
}

/// Reduced differential of the cost with respect to each control:
/// r_i = b_i - D_uF_i^* p_{i+1}.
inline std::vector<VectorXd> cost_gradient(const ControlSystem& sys, const CostSpec& cost,
                                           const Trajectory& traj) {
  const CostateSequence seq = backward_sweep(sys, cost, traj);
  std::vector<VectorXd> r(sys.horizon());
  for (int i = 0; i < sys.horizon(); ++i) {
    const MatrixXd ju = stage_jac_control(sys.stages[i], traj.states[i], traj.controls[i]);
    r[i] = seq.b[i] - ju.transpose() * seq.p[i + 1];
  }
  return r;
}

// --------------------------------------------------------------------------
// Criticality certificates

struct CriticalityReport {
  std::vector<VectorXd> residuals;      // r_i per stage
  std::vector<double> per_stage_delta;  // || P_cone(-r_i) ||_g
  double certified_delta = 0.0;
};

namespace detail {

inline CriticalityReport certificate_from_residuals(const ControlSystem& sys,
                                                    const Trajectory& traj,
                                                    std::vector<VectorXd> residuals,
                                                    const std::vector<Metric>* metrics) {
  CriticalityReport report;
  report.residuals = std::move(residuals);
  report.per_stage_delta.resize(sys.horizon());
  for (int i = 0; i < sys.horizon(); ++i) {
    const ControlSet& set = sys.control_sets[i];
    if (!set.contains(traj.controls[i])) {
      throw std::invalid_argument("criticality_certificate: control " + std::to_string(i) +
                                  " violates its control set");
    }
    if (metrics) {
      const Metric& g = (*metrics)[i];
      const VectorXd proj =
          tangent_cone_project(set, traj.controls[i], g.sharp(-report.residuals[i]), g);
      report.per_stage_delta[i] = g.norm(proj);
    } else {
      const VectorXd proj = tangent_cone_project(set, traj.controls[i], -report.residuals[i]);
      report.per_stage_delta[i] = proj.norm();
    }
    report.certified_delta = std::max(report.certified_delta, report.per_stage_delta[i]);
  }
  return report;
}

}  // namespace detail

/// Least Delta such that the stationarity inequality holds over the built-in
/// convex tangent cones: per stage, the metric norm of the cone projection
/// of -r_i. Zero certifies first-order criticality over the control sets.
inline CriticalityReport criticality_certificate(const ControlSystem& sys, const CostSpec& cost,
                                                 const Trajectory& traj,
                                                 const std::vector<Metric>* metrics = nullptr) {
  if (metrics && static_cast<int>(metrics->size()) != sys.horizon()) {
    throw std::invalid_argument("criticality_certificate: one metric per stage required");
  }
  return detail::certificate_from_residuals(sys, traj, cost_gradient(sys, cost, traj), metrics);
}

// --------------------------------------------------------------------------
// Initial state as a control

struct ExtendedProblem {
  ControlSystem sys;   // horizon n+1; stage 0 chooses the initial state
  CostSpec cost;       // kappa absorbed into stage 0's running cost
};

/// Rewrites a problem with an initial cost kappa and initial-state set S0 as
/// an (n+1)-stage system whose stage-0 control is the initial state. The
/// stage-0 entry of a criticality certificate on the result is the
/// initial-state condition || P_cone(-(beta - p_0)) ||.
inline ExtendedProblem extend_with_initial_state(const ControlSystem& sys, const CostSpec& cost,
                                                 const ControlSet& s0) {
  if (!cost.initial) {
    throw std::invalid_argument("extend_with_initial_state: cost has no initial term");
  }
  require_same_manifold(s0.manifold(), sys.state, "extend_with_initial_state");

  ExtendedProblem ext;
  Stage pick;
  pick.state = sys.state;
  pick.control = sys.state;
  pick.map = [](const Point& /*q*/, const Point& chosen) { return chosen; };
  pick.jac_state = [d = sys.state.dim()](const Point&, const Point&) {
    return MatrixXd(MatrixXd::Zero(d, d));
  };
  pick.jac_control = [d = sys.state.dim()](const Point&, const Point&) {
    return MatrixXd(MatrixXd::Identity(d, d));
  };

  std::vector<Stage> stages;
  stages.push_back(std::move(pick));
  stages.insert(stages.end(), sys.stages.begin(), sys.stages.end());
  std::vector<ControlSet> sets;
  sets.push_back(s0);
  sets.insert(sets.end(), sys.control_sets.begin(), sys.control_sets.end());
  ext.sys = make_control_system(sys.state, std::move(stages), std::move(sets));

  StageCost pick_cost;
  pick_cost.value = [kappa = cost.initial](const Point&, const Point& chosen) {
    return kappa(chosen);
  };
  if (cost.initial_grad) {
    pick_cost.grad_state = [d = sys.state.dim()](const Point&, const Point&) {
      return VectorXd(VectorXd::Zero(d));
    };
    pick_cost.grad_control = [g = cost.initial_grad](const Point&, const Point& chosen) {
      return g(chosen);
    };
  }
  ext.cost.terminal = cost.terminal;
  ext.cost.terminal_grad = cost.terminal_grad;
  ext.cost.running.push_back(std::move(pick_cost));
  ext.cost.running.insert(ext.cost.running.end(), cost.running.begin(), cost.running.end());
  return ext;
}

}  // namespace dgmp
