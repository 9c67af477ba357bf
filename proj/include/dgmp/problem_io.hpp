#pragma once

/** Problem definition files and CSV emission for the command-line front end.
 *
 * Problems are JSON documents with sections: manifold, horizon,
 * initial_state, dynamics, cost, control_sets, constraints, integrator,
 * solver, sweep, seed. Parsing is strict: unknown keys are rejected and all
 * matrices are dimension-checked against the declared manifolds. CSV output
 * uses 17 significant digits, comma separators, and newline endings so that
 * golden-file comparisons are byte-exact.
 */

#include <dgmp/builtins.hpp>

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace dgmp::io {

using nlohmann::json;

// --------------------------------------------------------------------------
// Strict JSON helpers

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require_keys(const json& obj, const std::string& where,
                         const std::vector<std::string>& allowed,
                         const std::vector<std::string>& required) {
  if (!obj.is_object()) throw SchemaError(where + ": expected an object");
  for (const auto& item : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw SchemaError(where + ": unknown key '" + item.key() + "'");
    }
  }
  for (const auto& key : required) {
    if (!obj.contains(key)) throw SchemaError(where + ": missing key '" + key + "'");
  }
}

inline double number(const json& v, const std::string& where) {
  if (!v.is_number()) throw SchemaError(where + ": expected a number");
  return v.get<double>();
}

inline int integer(const json& v, const std::string& where) {
  if (!v.is_number_integer()) throw SchemaError(where + ": expected an integer");
  return v.get<int>();
}

inline VectorXd vector(const json& v, const std::string& where, int expected = -1) {
  if (!v.is_array()) throw SchemaError(where + ": expected an array");
  VectorXd out(v.size());
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = number(v[k], where);
  if (expected >= 0 && out.size() != expected) {
    throw SchemaError(where + ": expected length " + std::to_string(expected) + ", got " +
                      std::to_string(out.size()));
  }
  return out;
}

inline MatrixXd matrix(const json& v, const std::string& where, int rows = -1, int cols = -1) {
  if (!v.is_array() || v.empty()) throw SchemaError(where + ": expected a matrix (array of rows)");
  const std::size_t c = v[0].is_array() ? v[0].size() : 0;
  if (c == 0) throw SchemaError(where + ": expected a matrix (array of rows)");
  MatrixXd out(v.size(), c);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_array() || v[i].size() != c) throw SchemaError(where + ": ragged matrix rows");
    for (std::size_t j = 0; j < c; ++j) out(i, j) = number(v[i][j], where);
  }
  if ((rows >= 0 && out.rows() != rows) || (cols >= 0 && out.cols() != cols)) {
    throw SchemaError(where + ": expected a " + std::to_string(rows) + "x" + std::to_string(cols) +
                      " matrix");
  }
  return out;
}

inline Matrix3d matrix3(const json& v, const std::string& where) {
  // Either a full 3x3 matrix or a length-3 diagonal.
  if (v.is_array() && v.size() == 3 && !v[0].is_array()) {
    return Matrix3d(Vector3d(vector(v, where, 3)).asDiagonal());
  }
  return Matrix3d(matrix(v, where, 3, 3));
}

}  // namespace detail

// --------------------------------------------------------------------------
// Problem definition

struct SweepSpec {
  int index = 0;                 // perturbation entry to vary
  std::vector<double> values;   // grid of shifts
};

struct Problem {
  ControlSystem sys;
  CostSpec cost;
  ConstraintSet cons;
  Point initial_state = identity_point(Manifold::euclidean(0));
  SolveOptions solver;
  std::optional<LieGroupProblem> integrator;
  VectorXd integrator_momentum;  // seed momentum for `integrate`
  std::optional<SweepSpec> sweep;
  unsigned seed = 0;

  bool constrained() const { return !cons.empty(); }
};

inline Problem parse_problem(const json& doc) {
  detail::require_keys(doc, "problem",
                       {"manifold", "horizon", "initial_state", "dynamics", "cost",
                        "control_sets", "constraints", "integrator", "solver", "sweep", "seed"},
                       {"manifold", "horizon", "initial_state", "dynamics", "cost"});

  // Manifold.
  const json& jm = doc["manifold"];
  detail::require_keys(jm, "manifold", {"kind", "dim"}, {"kind"});
  const std::string mkind = jm["kind"].get<std::string>();
  Manifold state = Manifold::euclidean(0);
  if (mkind == "euclidean") {
    if (!jm.contains("dim")) throw SchemaError("manifold: euclidean requires 'dim'");
    state = Manifold::euclidean(detail::integer(jm["dim"], "manifold.dim"));
  } else if (mkind == "so3") {
    state = Manifold::so3();
  } else {
    throw SchemaError("manifold: unknown kind '" + mkind + "'");
  }

  const int n = detail::integer(doc["horizon"], "horizon");
  if (n <= 0) throw SchemaError("horizon: must be positive");

  // Dynamics: fixes the stage map and the control manifold.
  const json& jd = doc["dynamics"];
  detail::require_keys(jd, "dynamics", {"name", "A", "B", "V", "W", "h"}, {"name"});
  const std::string dname = jd["name"].get<std::string>();
  Stage stage;
  if (dname == "linear") {
    if (mkind != "euclidean") throw SchemaError("dynamics.linear: euclidean state required");
    const MatrixXd A = detail::matrix(jd.at("A"), "dynamics.A", state.dim(), state.dim());
    const MatrixXd B = detail::matrix(jd.at("B"), "dynamics.B", state.dim(), -1);
    stage = builtins::linear_stage(A, B);
  } else if (dname == "lie_multiplicative") {
    if (mkind != "so3") throw SchemaError("dynamics.lie_multiplicative: so3 state required");
    stage = builtins::lie_multiplicative_stage();
  } else if (dname == "so3_retraction") {
    if (mkind != "so3") throw SchemaError("dynamics.so3_retraction: so3 state required");
    stage = builtins::so3_retraction_stage(detail::number(jd.at("h"), "dynamics.h"));
  } else if (dname == "euclidean_affine") {
    if (mkind != "euclidean") throw SchemaError("dynamics.euclidean_affine: euclidean state");
    const MatrixXd V = detail::matrix(jd.at("V"), "dynamics.V", state.dim(), state.dim());
    const MatrixXd W = detail::matrix(jd.at("W"), "dynamics.W", state.dim(), -1);
    stage = builtins::euclidean_affine_stage(V, W);
  } else {
    throw SchemaError("dynamics: unknown builtin '" + dname + "'");
  }
  const Manifold control = stage.control;

  // Integrator (optional; also used by the rigid-body action cost).
  Problem prob;
  if (doc.contains("integrator")) {
    const json& ji = doc["integrator"];
    detail::require_keys(ji, "integrator", {"J_d", "h", "potential", "initial_momentum"},
                         {"J_d", "h"});
    if (mkind != "so3") throw SchemaError("integrator: so3 state manifold required");
    const Matrix3d J_d = detail::matrix3(ji["J_d"], "integrator.J_d");
    const double h = detail::number(ji["h"], "integrator.h");
    std::function<double(const Point&)> phi;
    std::function<VectorXd(const Point&)> dphi;
    if (ji.contains("potential")) {
      const json& jp = ji["potential"];
      detail::require_keys(jp, "integrator.potential", {"name", "mgl"}, {"name"});
      const std::string pname = jp["name"].get<std::string>();
      if (pname == "so3_pendulum") {
        auto pot = builtins::so3_pendulum_potential(
            detail::number(jp.at("mgl"), "integrator.potential.mgl"));
        phi = pot.first;
        dphi = pot.second;
      } else if (pname != "none") {
        throw SchemaError("integrator.potential: unknown builtin '" + pname + "'");
      }
    }
    prob.integrator = make_rigid_body_problem(J_d, h, phi, dphi);
    prob.integrator_momentum =
        ji.contains("initial_momentum")
            ? detail::vector(ji["initial_momentum"], "integrator.initial_momentum", 3)
            : VectorXd(VectorXd::Zero(3));
  }

  // Cost.
  const json& jc = doc["cost"];
  detail::require_keys(jc, "cost",
                       {"name", "Qc", "Rc", "Qf", "q_ref", "target", "terminal_weight",
                        "control_weight", "terminal_momentum"},
                       {"name"});
  const std::string cname = jc["name"].get<std::string>();
  if (cname == "quadratic") {
    const MatrixXd Qc = detail::matrix(jc.at("Qc"), "cost.Qc", state.dim(), state.dim());
    const MatrixXd Rc = detail::matrix(jc.at("Rc"), "cost.Rc", control.dim(), control.dim());
    const MatrixXd Qf = detail::matrix(jc.at("Qf"), "cost.Qf", state.dim(), state.dim());
    const VectorXd q_ref = jc.contains("q_ref")
                               ? detail::vector(jc["q_ref"], "cost.q_ref", state.dim())
                               : VectorXd();
    prob.cost = builtins::quadratic_cost(Qc, Rc, Qf, n, q_ref);
  } else if (cname == "so3_slew") {
    if (mkind != "so3") throw SchemaError("cost.so3_slew: so3 state required");
    const Matrix3d target = detail::matrix3(jc.at("target"), "cost.target");
    prob.cost = builtins::so3_slew_cost(
        so3_point(target).rotation(),
        detail::number(jc.at("terminal_weight"), "cost.terminal_weight"),
        detail::number(jc.at("control_weight"), "cost.control_weight"), n);
  } else if (cname == "rigid_body_action") {
    if (!prob.integrator) throw SchemaError("cost.rigid_body_action: integrator section required");
    if (!control.same_as(Manifold::so3())) {
      throw SchemaError("cost.rigid_body_action: lie_multiplicative dynamics required");
    }
    if (jc.contains("terminal_momentum")) {
      const json& jt = jc["terminal_momentum"];
      detail::require_keys(jt, "cost.terminal_momentum", {"p", "attitude"}, {"p", "attitude"});
      const VectorXd p_ref = detail::vector(jt["p"], "cost.terminal_momentum.p", 3);
      const Point g_ref(Manifold::so3(),
                        detail::vector(jt["attitude"], "cost.terminal_momentum.attitude", 9));
      prob.cost = action_cost_with_momentum(*prob.integrator, n, g_ref, p_ref);
    } else {
      prob.cost = action_cost(*prob.integrator, n);
    }
  } else {
    throw SchemaError("cost: unknown builtin '" + cname + "'");
  }

  // Control sets: default whole manifold; per-stage or "all" entries.
  std::vector<ControlSet> sets(n, ControlSet::whole(control));
  if (doc.contains("control_sets")) {
    if (!doc["control_sets"].is_array()) throw SchemaError("control_sets: expected an array");
    for (const json& js : doc["control_sets"]) {
      detail::require_keys(js, "control_sets[]",
                           {"stage", "kind", "lower", "upper", "center", "radius", "A", "b",
                            "witness"},
                           {"kind"});
      const std::string kind = js["kind"].get<std::string>();
      ControlSet set = ControlSet::whole(control);
      if (kind == "box") {
        set = ControlSet::box(control,
                              detail::vector(js.at("lower"), "control_sets.lower", control.dim()),
                              detail::vector(js.at("upper"), "control_sets.upper", control.dim()));
      } else if (kind == "ball") {
        set = ControlSet::ball(control,
                               detail::vector(js.at("center"), "control_sets.center", control.dim()),
                               detail::number(js.at("radius"), "control_sets.radius"));
      } else if (kind == "polytope") {
        set = ControlSet::polytope(
            control, detail::matrix(js.at("A"), "control_sets.A", -1, control.dim()),
            detail::vector(js.at("b"), "control_sets.b"),
            detail::vector(js.at("witness"), "control_sets.witness", control.dim()));
      } else if (kind != "whole") {
        throw SchemaError("control_sets: unknown kind '" + kind + "'");
      }
      if (!js.contains("stage") || (js["stage"].is_string() && js["stage"] == "all")) {
        sets.assign(n, set);
      } else {
        const int i = detail::integer(js["stage"], "control_sets.stage");
        if (i < 0 || i >= n) throw SchemaError("control_sets: stage out of range");
        sets[i] = set;
      }
    }
  }

  prob.sys = make_control_system(state, std::vector<Stage>(n, stage), std::move(sets));
  prob.initial_state =
      Point(state, detail::vector(doc["initial_state"], "initial_state", state.rep_dim()));

  // Constraints.
  prob.cons.stage.resize(n);
  if (doc.contains("constraints")) {
    if (!doc["constraints"].is_array()) throw SchemaError("constraints: expected an array");
    for (const json& jx : doc["constraints"]) {
      detail::require_keys(jx, "constraints[]",
                           {"stage", "kind", "name", "state_coeff", "control_coeff", "rhs"},
                           {"stage", "kind", "name", "rhs"});
      const std::string name = jx["name"].get<std::string>();
      if (name != "linear") throw SchemaError("constraints: unknown builtin '" + name + "'");
      const std::string kind = jx["kind"].get<std::string>();
      if (kind != "ineq" && kind != "eq") throw SchemaError("constraints: kind must be ineq|eq");
      const double rhs = detail::number(jx["rhs"], "constraints.rhs");

      if (jx["stage"].is_string() && jx["stage"] == "terminal") {
        const VectorXd c =
            detail::vector(jx.at("state_coeff"), "constraints.state_coeff", state.dim());
        if (kind == "ineq") {
          prob.cons.terminal_ineq.push_back(builtins::linear_terminal_constraint(c, rhs));
        } else {
          prob.cons.terminal_eq.push_back(builtins::linear_terminal_constraint(c, rhs));
        }
      } else {
        const int i = detail::integer(jx["stage"], "constraints.stage");
        if (i < 1 || i >= n) {
          throw SchemaError("constraints: interior stage must be in 1..n-1");
        }
        const VectorXd cq =
            jx.contains("state_coeff")
                ? detail::vector(jx["state_coeff"], "constraints.state_coeff", state.dim())
                : VectorXd(VectorXd::Zero(state.dim()));
        const VectorXd cu =
            jx.contains("control_coeff")
                ? detail::vector(jx["control_coeff"], "constraints.control_coeff", control.dim())
                : VectorXd(VectorXd::Zero(control.dim()));
        auto f = builtins::linear_mixed_constraint(cq, cu, rhs);
        if (kind == "ineq") {
          prob.cons.stage[i].ineq.push_back(std::move(f));
        } else {
          prob.cons.stage[i].eq.push_back(std::move(f));
        }
      }
    }
  }

  // Solver options.
  if (doc.contains("solver")) {
    const json& js = doc["solver"];
    detail::require_keys(js, "solver",
                         {"max_iters", "tol", "kappa0", "kappa_growth", "max_outer_rounds",
                          "feasibility_tol", "step0"},
                         {});
    if (js.contains("max_iters")) prob.solver.max_iters = detail::integer(js["max_iters"], "solver.max_iters");
    if (js.contains("tol")) prob.solver.tol = detail::number(js["tol"], "solver.tol");
    if (js.contains("kappa0")) prob.solver.kappa0 = detail::number(js["kappa0"], "solver.kappa0");
    if (js.contains("kappa_growth")) {
      prob.solver.kappa_growth = detail::number(js["kappa_growth"], "solver.kappa_growth");
    }
    if (js.contains("max_outer_rounds")) {
      prob.solver.max_outer_rounds = detail::integer(js["max_outer_rounds"], "solver.max_outer_rounds");
    }
    if (js.contains("feasibility_tol")) {
      prob.solver.feasibility_tol = detail::number(js["feasibility_tol"], "solver.feasibility_tol");
    }
    if (js.contains("step0")) prob.solver.step0 = detail::number(js["step0"], "solver.step0");
    prob.solver.validate();
  }

  if (doc.contains("sweep")) {
    const json& js = doc["sweep"];
    detail::require_keys(js, "sweep", {"index", "values"}, {"index", "values"});
    SweepSpec spec;
    spec.index = detail::integer(js["index"], "sweep.index");
    for (const json& v : js["values"]) spec.values.push_back(detail::number(v, "sweep.values"));
    if (spec.index < 0 || spec.index >= prob.cons.perturbation_dim()) {
      throw SchemaError("sweep.index: out of range of the perturbation vector");
    }
    prob.sweep = spec;
  }

  if (doc.contains("seed")) prob.seed = static_cast<unsigned>(detail::integer(doc["seed"], "seed"));
  return prob;
}

inline Problem load_problem(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open problem file: " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& err) {
    throw std::runtime_error("problem file parse error: " + std::string(err.what()));
  }
  return parse_problem(doc);
}

// --------------------------------------------------------------------------
// CSV emission (bit-exact formatting)

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot open output file: " + path);
  }

  void header(const std::vector<std::string>& names) {
    for (std::size_t k = 0; k < names.size(); ++k) {
      if (k) out_ << ',';
      out_ << names[k];
    }
    out_ << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (k) out_ << ',';
      out_ << cells[k];
    }
    out_ << '\n';
  }

  void numeric_row(int index, const VectorXd& values) {
    out_ << index;
    for (int k = 0; k < values.size(); ++k) out_ << ',' << format_double(values[k]);
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

/// Controls CSV: header `stage,u_0,...`, one row per stage.
inline void write_controls_csv(const std::string& path, const std::vector<Point>& controls) {
  CsvWriter csv(path);
  std::vector<std::string> names = {"stage"};
  const int m = controls.empty() ? 0 : controls[0].manifold().rep_dim();
  for (int k = 0; k < m; ++k) names.push_back("u_" + std::to_string(k));
  csv.header(names);
  for (std::size_t i = 0; i < controls.size(); ++i) {
    csv.numeric_row(static_cast<int>(i), controls[i].coords());
  }
}

inline std::vector<Point> read_controls_csv(const std::string& path, const ControlSystem& sys) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open controls file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("controls file is empty: " + path);
  std::vector<Point> controls;
  int stage = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (stage >= sys.horizon()) {
      throw std::runtime_error("controls file has more rows than the horizon");
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
    if (vals.empty()) throw std::runtime_error("controls file: empty row");
    const int m = sys.stages[stage].control.rep_dim();
    if (static_cast<int>(vals.size()) != m + 1) {
      throw std::runtime_error("controls file row " + std::to_string(stage) + ": expected " +
                               std::to_string(m + 1) + " cells");
    }
    VectorXd u(m);
    for (int k = 0; k < m; ++k) u[k] = vals[k + 1];
    controls.emplace_back(sys.stages[stage].control, u);
    ++stage;
  }
  if (stage != sys.horizon()) {
    throw std::runtime_error("controls file has " + std::to_string(stage) + " rows, expected " +
                             std::to_string(sys.horizon()));
  }
  return controls;
}

}  // namespace dgmp::io
