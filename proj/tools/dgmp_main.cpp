// Command-line front end: rollout, solve, check, integrate, and sweep over
// problem definition files. Exit codes: 0 ok, 1 I/O, 2 validation,
// 3 solver failure, 4 integrator failure.

#include <dgmp/problem_io.hpp>

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace {

using namespace dgmp;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitValidation = 2;
constexpr int kExitSolver = 3;
constexpr int kExitIntegrator = 4;

struct CommonArgs {
  std::string problem_path;
  std::string out_dir = ".";
  std::optional<unsigned> seed;
  std::optional<double> tol;
  std::optional<int> max_iters;
  std::optional<double> kappa0;
};

io::Problem load(const CommonArgs& args) {
  io::Problem prob = io::load_problem(args.problem_path);
  if (args.seed) prob.seed = *args.seed;
  if (args.tol) prob.solver.tol = *args.tol;
  if (args.max_iters) prob.solver.max_iters = *args.max_iters;
  if (args.kappa0) prob.solver.kappa0 = *args.kappa0;
  prob.solver.seed = prob.seed;
  return prob;
}

std::string out_path(const CommonArgs& args, const std::string& name) {
  std::filesystem::create_directories(args.out_dir);
  return (std::filesystem::path(args.out_dir) / name).string();
}

int threads_from_env() {
  const char* env = std::getenv("DGMP_THREADS");
  if (!env) return 1;
  const int v = std::atoi(env);
  return v > 0 ? v : 1;
}

std::vector<Point> default_controls(const io::Problem& prob) {
  std::vector<Point> u;
  for (int i = 0; i < prob.sys.horizon(); ++i) {
    u.push_back(prob.sys.control_sets[i].project(identity_point(prob.sys.stages[i].control)));
  }
  return u;
}

json multipliers_to_json(const MultiplierSequence& m) {
  json out;
  out["lambda0"] = m.lambda0;
  json ineq = json::array(), eq = json::array();
  for (std::size_t i = 0; i < m.ineq.size(); ++i) {
    for (int j = 0; j < m.ineq[i].size(); ++j) {
      ineq.push_back({{"stage", i}, {"index", j}, {"value", m.ineq[i][j]}});
    }
    for (int j = 0; j < m.eq[i].size(); ++j) {
      eq.push_back({{"stage", i}, {"index", j}, {"value", m.eq[i][j]}});
    }
  }
  out["inequality"] = ineq;
  out["equality"] = eq;
  return out;
}

void write_states_csv(const std::string& path, const std::vector<Point>& states) {
  io::CsvWriter csv(path);
  std::vector<std::string> names = {"step"};
  for (int k = 0; k < states[0].manifold().rep_dim(); ++k) {
    names.push_back("q_" + std::to_string(k));
  }
  csv.header(names);
  for (std::size_t i = 0; i < states.size(); ++i) {
    csv.numeric_row(static_cast<int>(i), states[i].coords());
  }
}

int cmd_rollout(const CommonArgs& args, const std::string& controls_path) {
  const io::Problem prob = load(args);
  const auto controls = io::read_controls_csv(controls_path, prob.sys);
  const Trajectory traj = rollout(prob.sys, prob.initial_state, controls);
  validate_trajectory(prob.sys, traj);
  write_states_csv(out_path(args, "rollout.csv"), traj.states);
  return kExitOk;
}

int cmd_solve(const CommonArgs& args) {
  const io::Problem prob = load(args);
  json report;
  report["command"] = "solve";
  report["seed"] = prob.seed;

  SolveStatus status;
  Trajectory traj;
  if (prob.constrained()) {
    const VectorXd e = VectorXd::Zero(prob.cons.perturbation_dim());
    const PenaltyResult res = penalty_solve(prob.sys, prob.cost, prob.cons, e, prob.initial_state,
                                            default_controls(prob), prob.solver);
    status = res.report.status;
    traj = res.report.trajectory;
    report["status"] = to_string(res.report.status);
    report["cost"] = res.report.cost_value;
    report["certified_delta"] = res.report.certified_delta;
    report["penalty"] = res.report.penalty_value;
    report["iterations"] = res.report.iterations;
    json hist = json::array();
    for (const auto& [kappa, pval] : res.report.penalty_history) {
      hist.push_back({{"kappa", kappa}, {"penalty", pval}});
    }
    report["penalty_history"] = hist;
    report["multipliers"] = multipliers_to_json(res.multipliers.multipliers);
    report["multiplier_status"] =
        res.multipliers.status == MultiplierAssembly::Status::Normal       ? "Normal"
        : res.multipliers.status == MultiplierAssembly::Status::Degenerate ? "Degenerate"
                                                                           : "NoCertificate";
    if (res.normality) {
      report["strictly_normal"] = res.normality->strictly_normal;
      if (!res.normality->strictly_normal) {
        report["abnormal_certificate"] = multipliers_to_json(res.normality->witness);
        report["abnormal_residual"] = res.normality->residual;
      }
    }
    if (!res.report.diagnostics.empty()) report["diagnostics"] = res.report.diagnostics;
  } else {
    const SolveReport res =
        minimize(prob.sys, prob.cost, prob.initial_state, default_controls(prob), prob.solver);
    status = res.status;
    traj = res.trajectory;
    report["status"] = to_string(res.status);
    report["cost"] = res.cost_value;
    report["certified_delta"] = res.certified_delta;
    report["iterations"] = res.iterations;
    if (!res.diagnostics.empty()) report["diagnostics"] = res.diagnostics;
  }

  io::write_controls_csv(out_path(args, "solution_controls.csv"), traj.controls);
  write_states_csv(out_path(args, "solution_states.csv"), traj.states);
  std::ofstream out(out_path(args, "report.json"), std::ios::binary);
  out << report.dump(2) << '\n';
  return status == SolveStatus::Converged ? kExitOk : kExitSolver;
}

int cmd_check(const CommonArgs& args, const std::string& controls_path) {
  const io::Problem prob = load(args);
  const auto controls = io::read_controls_csv(controls_path, prob.sys);
  for (int i = 0; i < prob.sys.horizon(); ++i) {
    if (!prob.sys.control_sets[i].contains(controls[i])) {
      throw std::invalid_argument("control " + std::to_string(i) + " violates its control set");
    }
  }
  const Trajectory traj = rollout(prob.sys, prob.initial_state, controls);

  json report;
  report["command"] = "check";
  const CostateSequence seq = backward_sweep(prob.sys, prob.cost, traj);
  const CriticalityReport cert = criticality_certificate(prob.sys, prob.cost, traj);
  report["certified_delta"] = cert.certified_delta;
  json deltas = json::array(), residuals = json::array(), costates = json::array();
  for (double d : cert.per_stage_delta) deltas.push_back(d);
  for (const VectorXd& r : cert.residuals) {
    json row = json::array();
    for (int k = 0; k < r.size(); ++k) row.push_back(r[k]);
    residuals.push_back(row);
  }
  for (const VectorXd& p : seq.p) {
    json row = json::array();
    for (int k = 0; k < p.size(); ++k) row.push_back(p[k]);
    costates.push_back(row);
  }
  report["per_stage_delta"] = deltas;
  report["residuals"] = residuals;
  report["costates"] = costates;

  json maxim = json::array();
  for (int i = 0; i < prob.sys.horizon(); ++i) {
    try {
      const auto mx = maximization_check(prob.sys, prob.cost, traj, seq.p, i);
      maxim.push_back({{"stage", i}, {"pass", mx.pass}, {"gap", mx.gap}});
    } catch (const std::invalid_argument&) {
      maxim.push_back({{"stage", i}, {"applicable", false}});
    }
  }
  report["maximization"] = maxim;

  if (prob.constrained()) {
    const VectorXd e = VectorXd::Zero(prob.cons.perturbation_dim());
    report["penalty"] = penalty_eval(prob.cons, e, traj).total;
  }

  std::ofstream out(out_path(args, "check.json"), std::ios::binary);
  out << report.dump(2) << '\n';
  return kExitOk;
}

int cmd_integrate(const CommonArgs& args, int steps) {
  const io::Problem prob = load(args);
  if (!prob.integrator) {
    throw io::SchemaError("integrate: problem file has no integrator section");
  }
  if (!prob.initial_state.manifold().same_as(Manifold::so3())) {
    throw io::SchemaError("integrate: so3 initial state required");
  }
  const IntegrationResult run =
      integrate(*prob.integrator, prob.initial_state, prob.integrator_momentum, steps);

  io::CsvWriter csv(out_path(args, "integrate.csv"));
  std::vector<std::string> names = {"step"};
  for (int k = 0; k < 9; ++k) names.push_back("g_" + std::to_string(k));
  for (int k = 0; k < 3; ++k) names.push_back("p_" + std::to_string(k));
  names.push_back("p_norm");
  names.push_back("residual");
  csv.header(names);
  for (std::size_t i = 0; i < run.states.size(); ++i) {
    VectorXd row(14);
    row.head<9>() = run.states[i].coords();
    row.segment<3>(9) = run.momenta[i];
    row[12] = run.momenta[i].norm();
    row[13] = run.residuals[i];
    csv.numeric_row(static_cast<int>(i), row);
  }
  return kExitOk;
}

int cmd_sweep(const CommonArgs& args) {
  const io::Problem prob = load(args);
  if (!prob.constrained()) throw io::SchemaError("sweep: problem has no constraints");
  if (!prob.sweep) throw io::SchemaError("sweep: problem file has no sweep section");

  std::vector<VectorXd> grid;
  for (double v : prob.sweep->values) {
    VectorXd e = VectorXd::Zero(prob.cons.perturbation_dim());
    e[prob.sweep->index] = v;
    grid.push_back(e);
  }
  const ValueSweep sweep =
      value_sensitivity(prob.sys, prob.cost, prob.cons, prob.initial_state,
                        default_controls(prob), grid, prob.solver, threads_from_env());

  io::CsvWriter csv(out_path(args, "sweep.csv"));
  csv.header({"e", "value", "status"});
  for (std::size_t k = 0; k < sweep.entries.size(); ++k) {
    const auto& entry = sweep.entries[k];
    csv.row({io::format_double(prob.sweep->values[k]),
             entry.solved ? io::format_double(entry.value) : "",
             entry.solved ? to_string(entry.status) : "unsolved"});
  }
  csv.row({"calmness_estimate", io::format_double(sweep.calmness_bound),
           sweep.calm ? "calm" : "inconclusive"});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Discrete-time optimal control on manifolds: rollout, solve, check, integrate, sweep"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string controls_path;
  int steps = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_controls = false) {
    cmd->add_option("problem", args.problem_path, "problem definition (JSON)")->required();
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option_function<unsigned>(
        "--seed", [&args](const unsigned& v) { args.seed = v; }, "seed override");
    cmd->add_option_function<double>(
        "--tol", [&args](const double& v) { args.tol = v; }, "solver tolerance override");
    cmd->add_option_function<int>(
        "--max-iters", [&args](const int& v) { args.max_iters = v; }, "iteration limit override");
    cmd->add_option_function<double>(
        "--kappa0", [&args](const double& v) { args.kappa0 = v; }, "initial penalty weight");
    if (needs_controls) {
      cmd->add_option("--controls", controls_path, "controls CSV")->required();
    }
  };

  CLI::App* rollout_cmd =
      app.add_subcommand("rollout", "roll a control sequence through the dynamics");
  add_common(rollout_cmd, true);
  CLI::App* solve_cmd = app.add_subcommand("solve", "minimize the problem cost");
  add_common(solve_cmd);
  CLI::App* check_cmd =
      app.add_subcommand("check", "necessary-conditions report for given controls");
  add_common(check_cmd, true);
  CLI::App* integrate_cmd = app.add_subcommand("integrate", "variational integrator run");
  add_common(integrate_cmd);
  integrate_cmd->add_option("--steps", steps, "number of integrator steps")->required();
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "value function over constraint shifts");
  add_common(sweep_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (rollout_cmd->parsed()) return cmd_rollout(args, controls_path);
    if (solve_cmd->parsed()) return cmd_solve(args);
    if (check_cmd->parsed()) return cmd_check(args, controls_path);
    if (integrate_cmd->parsed()) return cmd_integrate(args, steps);
    if (sweep_cmd->parsed()) return cmd_sweep(args);
  } catch (const dgmp::NewtonDivergence& e) {
    std::cerr << "integrator failure at step " << e.step_index() << ": " << e.what() << "\n";
    return kExitIntegrator;
  } catch (const dgmp::io::SchemaError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitOk;
}
