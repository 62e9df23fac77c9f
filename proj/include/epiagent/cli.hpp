#pragma once

// Command-line surface. Commands return process exit codes and write to the
// given streams so they can be driven in-process.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "epiagent/agents.hpp"
#include "epiagent/calibration.hpp"
#include "epiagent/compiler.hpp"
#include "epiagent/ensemble.hpp"
#include "epiagent/error.hpp"
#include "epiagent/flowgraph.hpp"
#include "epiagent/io.hpp"
#include "epiagent/llm_planner.hpp"
#include "epiagent/parallel.hpp"
#include "epiagent/planner.hpp"
#include "epiagent/retrieval.hpp"
#include "epiagent/scenario.hpp"
#include "epiagent/simulator.hpp"
#include "epiagent/vnv.hpp"

namespace epiagent::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kError = 1,
  kVerificationFailed = 2,
  kValidationFailed = 3,
  kBudgetExhausted = 4,
  kNoPassingCandidate = 5,
};

struct Manifest {
  std::vector<std::string> scenario_files;
  std::string graph;
  std::string params;
  std::string theta;
  std::string data;
  std::string patches;
  std::string contact;
  std::string corpus;
  std::string config;
  std::string out;
  std::string planner;
  std::string data_out;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool allow_unverified = false;
  bool full_state = false;
};

struct Inputs {
  std::vector<Scenario> scenarios;
  std::optional<FlowGraph> graph;
  std::optional<ModelSpec> spec;
  PatchStructure patches = PatchStructure::single();
  std::optional<Dataset> dataset;
  io::RunConfig config;
};

inline void require_exists(const std::string& path, const char* flag) {
  if (!path.empty() && !fs::exists(path)) throw Error(std::string(flag) + ": no such file or directory '" + path + "'");
}

// Loads whatever the manifest references; all paths are checked up front.
inline Inputs load_inputs(const Manifest& m) {
  for (const auto& s : m.scenario_files) require_exists(s, "--scenario");
  require_exists(m.graph, "--graph");
  require_exists(m.params, "--params");
  require_exists(m.theta, "--theta");
  require_exists(m.data, "--data");
  require_exists(m.patches, "--patches");
  require_exists(m.contact, "--contact");
  require_exists(m.corpus, "--corpus");
  require_exists(m.config, "--config");

  Inputs in;
  if (!m.config.empty()) in.config = io::parse_config(io::read_file(m.config));
  in.config.calibration.seed = m.seed;
  for (const auto& s : m.scenario_files) {
    auto list = parse_scenarios(io::read_file(s));
    in.scenarios.insert(in.scenarios.end(), list.begin(), list.end());
  }
  if (m.scenario_files.size() > 1) {
    std::set<std::string> ids;
    for (const auto& s : in.scenarios)
      if (!ids.insert(s.id).second) throw ParseError("duplicate scenario id '" + s.id + "'");
    detail::check_orderings_acyclic(in.scenarios);
  }
  if (!m.graph.empty()) in.graph = parse_graph(io::read_file(m.graph));
  if (!m.params.empty()) in.spec = parse_model_spec(io::read_file(m.params));
  if (!m.patches.empty())
    in.patches = io::parse_patches(io::read_file(m.patches), m.contact.empty() ? "" : io::read_file(m.contact));
  if (!m.data.empty()) in.dataset = io::parse_dataset(io::read_file(m.data), in.patches);
  return in;
}

inline void need(bool ok, const char* what) {
  if (!ok) throw Error(std::string("missing required input: ") + what);
}

struct CompiledScenario {
  const Scenario* scenario;
  CompiledModel model;
  InitialCondition x0;
};

inline std::vector<CompiledScenario> compile_all(const Inputs& in, bool allow_unverified) {
  need(in.graph.has_value(), "--graph");
  need(in.spec.has_value(), "--params");
  need(!in.scenarios.empty(), "--scenario");
  CompileOptions opts;
  opts.allow_unverified = allow_unverified;
  opts.row_normalize_contacts = in.config.row_normalize_contacts;
  opts.schedule_bindings = in.spec->schedule_bindings;
  std::vector<CompiledScenario> out;
  for (const auto& s : in.scenarios) {
    auto model = compile(*in.graph, s, in.patches, in.spec->params, opts);
    auto x0 = make_initial_condition(model, s.initial);
    check_initial_condition(model, x0);
    out.push_back({&s, std::move(model), std::move(x0)});
  }
  return out;
}

inline std::size_t horizon_for(const Inputs& in, const std::string& scenario_id) {
  std::size_t weeks = in.config.simulation.horizon_weeks;
  if (in.dataset)
    if (auto it = in.dataset->find(scenario_id); it != in.dataset->end()) weeks = std::max(weeks, it->second.weeks);
  return weeks;
}

inline std::vector<double> theta_for(const Manifest& m, const Inputs& in) {
  if (m.theta.empty()) return in.spec->params.flatten();
  return io::parse_theta_csv(io::read_file(m.theta), in.spec->params.flat_names());
}

inline std::string safe_name(const std::string& id) {
  std::string s = id;
  for (auto& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return s;
}

// ---------------------------------------------------------------------------

inline int cmd_verify_graph(const Manifest& m, std::ostream& out) {
  need(!m.graph.empty(), "--graph");
  require_exists(m.graph, "--graph");
  const auto graph = parse_graph(io::read_file(m.graph));
  const auto verdict = validate_structure(graph);
  out << verdict.render();
  return verdict.passed() ? kOk : kVerificationFailed;
}

inline int cmd_compile(const Manifest& m, std::ostream& out) {
  const auto in = load_inputs(m);
  const auto models = compile_all(in, m.allow_unverified);
  for (const auto& c : models) {
    out << "scenario " << c.scenario->id << ": " << c.model.num_compartments() << " compartments x "
        << c.model.num_patches() << " patches, " << c.model.flows().size() << " flow terms, " << c.model.dof()
        << " trainable parameters" << (c.model.verified() ? "" : " [UNVERIFIED]") << "\n";
  }
  out << "parameters:";
  for (const auto& n : in.spec->params.flat_names()) out << " " << n;
  out << "\n";
  return kOk;
}

inline int cmd_simulate(const Manifest& m, std::ostream& out) {
  need(!m.out.empty() || !m.data_out.empty(), "--out or --data-out");
  const auto in = load_inputs(m);
  const auto models = compile_all(in, m.allow_unverified);
  const auto theta = theta_for(m, in);
  std::vector<std::optional<SimulationResult>> results(models.size());
  parallel_for(models.size(), m.jobs, [&](std::size_t i) {
    results[i] = simulate(BoundModel(models[i].model, theta), models[i].x0, horizon_for(in, models[i].scenario->id),
                          in.config.simulation.dt_days);
  });

  nlohmann::json summary = nlohmann::json::array();
  std::string data_csv = io::dataset_csv_header();
  bool all_stable = true;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& id = models[i].scenario->id;
    const auto& res = *results[i];
    const bool verified = models[i].model.verified();
    if (!m.out.empty()) {
      io::write_file(fs::path(m.out) / ("trajectory_" + safe_name(id) + ".csv"),
                     io::trajectory_csv(res.trajectory, in.patches.ids));
      if (m.full_state)
        io::write_file(fs::path(m.out) / ("state_" + safe_name(id) + ".csv"), io::state_dump_csv(res.trajectory));
    }
    data_csv += io::dataset_csv_rows(id, res.trajectory.weekly, in.patches);
    all_stable = all_stable && res.stability.stable;
    out << (verified ? "" : "UNVERIFIED ") << "scenario " << id << ": " << res.stability.describe() << ", "
        << res.trajectory.weekly.weeks << " weeks\n";
    summary.push_back({{"scenario", id},
                       {"verified_graph", verified},
                       {"stable", res.stability.stable},
                       {"stability", res.stability.describe()},
                       {"weeks", res.trajectory.weekly.weeks}});
  }
  if (!m.out.empty()) io::write_file(fs::path(m.out) / "simulation_summary.json", summary.dump(2) + "\n");
  if (!m.data_out.empty()) io::write_file(m.data_out, data_csv);
  return all_stable ? kOk : kVerificationFailed;
}

inline CalibrationProblem make_problem(const Inputs& in, const std::vector<CompiledScenario>& models) {
  need(in.dataset.has_value(), "--data");
  CalibrationProblem problem;
  problem.dt_days = in.config.simulation.dt_days;
  for (const auto& c : models)
    if (auto it = in.dataset->find(c.scenario->id); it != in.dataset->end())
      problem.scenarios.push_back({c.model, c.x0, it->second});
  if (problem.scenarios.empty()) throw CalibrationError("no scenario has observed data");
  return problem;
}

inline int cmd_calibrate(const Manifest& m, std::ostream& out) {
  need(!m.out.empty(), "--out");
  const auto in = load_inputs(m);
  const auto models = compile_all(in, m.allow_unverified);
  const auto problem = make_problem(in, models);
  const auto result = calibrate(problem, theta_for(m, in), in.config.calibration);
  const fs::path dir(m.out);
  io::write_file(dir / "theta.csv", io::theta_csv(result.names, result.theta_star));
  io::write_file(dir / "loss_history.csv", io::loss_history_csv(result));
  nlohmann::json report = {{"final_loss", result.final_loss},
                           {"steps", result.loss_history.size() - 1},
                           {"constraint_report", result.constraint_report},
                           {"per_scenario_fit", nlohmann::json::object()}};
  for (std::size_t i = 0; i < problem.scenarios.size(); ++i)
    report["per_scenario_fit"][problem.scenarios[i].model.scenario_id()] = result.per_scenario_fit[i];
  io::write_file(dir / "calibration_report.json", report.dump(2) + "\n");
  out << "final loss " << io::num(result.final_loss) << " after " << result.loss_history.size() - 1 << " steps\n";
  for (std::size_t i = 0; i < result.names.size(); ++i)
    out << "  " << result.names[i] << " = " << io::num(result.theta_star[i]) << "\n";
  for (const auto& c : result.constraint_report) out << "  constraint: " << c << "\n";
  return kOk;
}

inline int cmd_validate(const Manifest& m, std::ostream& out) {
  const auto in = load_inputs(m);
  const auto models = compile_all(in, m.allow_unverified);
  const auto theta = theta_for(m, in);
  const auto& tol = in.config.vnv;
  std::vector<std::optional<SimulationResult>> results(models.size());
  parallel_for(models.size(), m.jobs, [&](std::size_t i) {
    results[i] = simulate(BoundModel(models[i].model, theta), models[i].x0, horizon_for(in, models[i].scenario->id),
                          in.config.simulation.dt_days);
  });
  const auto param_report = verify_parameters(in.spec->params.with_values(theta));
  std::map<std::string, Trajectory> trajectories;
  nlohmann::json report = {{"verification", nlohmann::json::object()}};
  bool verified = true;
  for (std::size_t i = 0; i < models.size(); ++i) {
    auto rep = verify_trajectory(results[i]->trajectory, results[i]->stability, tol);
    rep.merge(param_report).merge(verify_graph_code(models[i].model));
    verified = verified && rep.passed();
    out << "scenario " << models[i].scenario->id << ":\n" << rep.summary();
    report["verification"][models[i].scenario->id] = rep.to_json();
    trajectories[models[i].scenario->id] = std::move(results[i]->trajectory);
  }
  const auto validation = validate_scenarios(trajectories, collect_expectations(in.scenarios), tol.ordering);
  out << validation.summary();
  report["validation"] = validation.to_json();
  if (!m.out.empty()) io::write_file(fs::path(m.out) / "vnv_report.json", report.dump(2) + "\n");
  if (!verified) return kVerificationFailed;
  return validation.status == ValidationReport::Status::Fail ? kValidationFailed : kOk;
}

inline int cmd_project(const Manifest& m, std::ostream& out) {
  need(!m.out.empty(), "--out");
  const auto in = load_inputs(m);
  const auto models = compile_all(in, m.allow_unverified);
  const auto theta = theta_for(m, in);
  for (const auto& c : models) {
    const auto bands =
        project_ensemble(c.model, c.x0, theta, in.config.ensemble.scale, in.config.ensemble.size, m.seed,
                         horizon_for(in, c.scenario->id), in.config.simulation.dt_days, m.jobs);
    io::write_file(fs::path(m.out) / ("bands_" + safe_name(c.scenario->id) + ".csv"),
                   io::bands_csv(bands, in.patches.ids));
    out << "scenario " << c.scenario->id << ": " << bands.ensemble_size << " members, " << bands.dropped
        << " dropped\n";
  }
  return kOk;
}

inline std::unique_ptr<Planner> make_planner(const std::string& selection) {
  const std::string scripted = "scripted:";
  if (selection.rfind(scripted, 0) == 0)
    return std::make_unique<ScriptedPlanner>(ScriptedPlanner::from_file(selection.substr(scripted.size())));
  if (selection == "llm") return llm_planner(EndpointConfig::from_env());
  throw Error("--planner must be scripted:<path> or llm");
}

inline int cmd_pipeline(const Manifest& m, std::ostream& out) {
  need(!m.out.empty(), "--out");
  need(!m.planner.empty(), "--planner");
  auto in = load_inputs(m);
  need(!in.scenarios.empty(), "--scenario");
  need(in.dataset.has_value(), "--data");
  auto planner = make_planner(m.planner);
  std::vector<CorpusDocument> corpus;
  if (!m.corpus.empty()) corpus = load_corpus(m.corpus);

  LoopConfig loop = in.config.loop;
  if (m.allow_unverified) loop.verify_graphs = false;

  const fs::path dir(m.out);
  fs::create_directories(dir);
  fs::remove(dir / "transcript.jsonl");
  Transcript transcript((dir / "transcript.jsonl").string());

  const auto started = std::chrono::system_clock::now();
  RunArtifacts run;
  std::vector<GraphAttempt> graph_history;
  std::optional<FlowGraph> graph;
  bool graph_verified = true;
  std::vector<Passage> passages;
  if (!corpus.empty()) passages = make_passages(retrieve(scenarios_text(in.scenarios), corpus, loop.retrieval_k), corpus);

  if (in.graph) {
    graph = in.graph;
    graph_verified = validate_structure(*graph).passed();
    if (!graph_verified && loop.verify_graphs) {
      out << validate_structure(*graph).render();
      throw Error("supplied graph fails verification (use --allow-unverified for the ablation)");
    }
    transcript.record({{"event", "graph_supplied"}, {"verified", graph_verified}});
  } else {
    if (corpus.empty()) throw Error("missing required input: --corpus (or --graph)");
    auto gl = graph_loop(in.scenarios, corpus, *planner, loop, &transcript);
    graph_history = gl.history;
    run.planner_calls += gl.planner_calls;
    if (gl.outcome == GraphLoopResult::Outcome::PlannerFailure) throw PlannerError(gl.error);
    if (!gl.ok()) {
      out << "graph synthesis: " << gl.error << "\n";
      nlohmann::json report = {{"outcome", "budget_exhausted"}, {"graph_attempts", gl.history.size()}};
      io::write_file(dir / "run_report.json", report.dump(2) + "\n");
      return kBudgetExhausted;
    }
    graph = gl.graph;
    graph_verified = gl.outcome == GraphLoopResult::Outcome::Verified;
  }
  io::write_file(dir / "graph.json", serialize_graph(*graph) + "\n");

  GenerationInputs gi{*graph, graph_verified, in.scenarios, *in.dataset, in.patches, passages,
                      in.config.row_normalize_contacts};
  const std::size_t graph_calls = run.planner_calls;
  run = generation_loop(gi, *planner, loop, in.config.calibration, in.config.vnv, in.config.simulation, &transcript);
  run.planner_calls += graph_calls;
  run.graph_history = graph_history;
  if (run.outcome == RunArtifacts::Outcome::PlannerFailure) throw PlannerError(run.error);

  // Per-generation reports.
  for (const auto& c : run.candidates) {
    const fs::path gdir = dir / "generations" / ("gen_" + std::to_string(c.generation));
    io::write_file(gdir / "theta.csv", io::theta_csv(c.names, c.theta));
    io::write_file(gdir / "loss_history.csv", io::loss_history_csv(c.calibration));
    nlohmann::json vnv = {{"verification", nlohmann::json::object()}, {"validation", c.validation.to_json()}};
    for (const auto& [id, rep] : c.verification) vnv["verification"][id] = rep.to_json();
    vnv["vnv_passed"] = c.vnv_passed;
    vnv["loss"] = c.loss;
    io::write_file(gdir / "vnv_report.json", vnv.dump(2) + "\n");
  }
  std::string feedback;
  for (const auto& f : run.feedback_transcript) feedback += f + "\n";
  io::write_file(dir / "feedback.txt", feedback);

  nlohmann::json report = {{"outcome", outcome_name(run.outcome)},
                           {"graph_attempts", graph_history.size()},
                           {"graph_verified", graph_verified},
                           {"generations", run.candidates.size()},
                           {"planner_calls", run.planner_calls}};
  if (run.accepted_generation) report["accepted_generation"] = *run.accepted_generation;

  std::string summary = "scenario_id,final_loss,verification,validation\n";
  if (const Candidate* best = run.best()) {
    report["selected_generation"] = best->generation;
    report["final_loss"] = best->loss;
    io::write_file(dir / "theta.csv", io::theta_csv(best->names, best->theta));
    std::size_t k = 0;
    std::map<std::string, double> fit;
    for (const auto& s : in.scenarios)
      if (in.dataset->count(s.id)) fit[s.id] = best->calibration.per_scenario_fit.at(k++);
    for (const auto& s : in.scenarios) {
      const auto& traj = best->trajectories.at(s.id);
      io::write_file(dir / "trajectories" / (safe_name(s.id) + ".csv"), io::trajectory_csv(traj, in.patches.ids));
      summary += s.id + "," + (fit.count(s.id) ? io::num(fit[s.id]) : std::string("")) + "," +
                 (best->verification.at(s.id).passed() ? "Pass" : "Fail") + "," + best->validation.status_name() +
                 "\n";
    }
    std::string orderings = "metric,lower,higher,lower_value,higher_value,satisfied\n";
    for (const auto& o : best->validation.orderings)
      orderings += metric_name(o.metric) + "," + o.lower + "," + o.higher + "," + io::num(o.lower_value) + "," +
                   io::num(o.higher_value) + "," + (o.satisfied ? "true" : "false") + "\n";
    io::write_file(dir / "orderings.csv", orderings);
  }
  io::write_file(dir / "summary.csv", summary);
  io::write_file(dir / "run_report.json", report.dump(2) + "\n");

  // Timestamps live only here.
  const auto finished = std::chrono::system_clock::now();
  auto stamp = [](std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return std::string(buf);
  };
  nlohmann::json meta = {{"started", stamp(started)}, {"finished", stamp(finished)}, {"seed", m.seed}};
  io::write_file(dir / "metadata.json", meta.dump(2) + "\n");

  out << "outcome: " << outcome_name(run.outcome) << " (" << run.candidates.size() << " generations, "
      << graph_history.size() << " graph attempts)\n";
  for (const auto& c : run.candidates)
    out << "  generation " << c.generation << ": loss " << io::num(c.loss) << ", V&V "
        << (c.vnv_passed ? "Pass" : "Fail") << " (validation " << c.validation.status_name() << ")\n";

  switch (run.outcome) {
    case RunArtifacts::Outcome::Accepted: return kOk;
    case RunArtifacts::Outcome::NotConverged: return kBudgetExhausted;
    case RunArtifacts::Outcome::NoPassingCandidate: return kNoPassingCandidate;
    case RunArtifacts::Outcome::PlannerFailure: return kError;
  }
  return kError;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Build, verify, calibrate and validate compartmental epidemic models"};
  app.require_subcommand(1);
  Manifest m;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--scenario", m.scenario_files, "scenario document(s)");
    sub->add_option("--graph", m.graph, "flow-graph document");
    sub->add_option("--params", m.params, "parameter / model-spec document");
    sub->add_option("--theta", m.theta, "calibrated theta CSV (overrides parameter values)");
    sub->add_option("--data", m.data, "observed-data CSV");
    sub->add_option("--patches", m.patches, "patch CSV (patch_id,population)");
    sub->add_option("--contact", m.contact, "contact-matrix CSV");
    sub->add_option("--corpus", m.corpus, "knowledge-corpus directory");
    sub->add_option("--config", m.config, "run configuration document");
    sub->add_option("--out", m.out, "output directory");
    sub->add_option("--seed", m.seed, "random seed");
    sub->add_option("--jobs", m.jobs, "parallel scenario / member limit")->check(CLI::PositiveNumber);
    sub->add_flag("--allow-unverified", m.allow_unverified, "skip structural verification (ablation)");
  };

  auto* verify = app.add_subcommand("verify-graph", "check a flow graph against the structural rules");
  verify->add_option("--graph", m.graph, "flow-graph document")->required();
  auto* compile_cmd = app.add_subcommand("compile", "compile a graph for each scenario");
  add_common(compile_cmd);
  auto* simulate_cmd = app.add_subcommand("simulate", "integrate each scenario and write trajectories");
  add_common(simulate_cmd);
  simulate_cmd->add_flag("--full-state", m.full_state, "also write every compartment at every step");
  simulate_cmd->add_option("--data-out", m.data_out, "write weekly outputs as an observed-data CSV");
  auto* calibrate_cmd = app.add_subcommand("calibrate", "fit parameters to observed data");
  add_common(calibrate_cmd);
  auto* validate_cmd = app.add_subcommand("validate", "run verification and scenario validation");
  add_common(validate_cmd);
  auto* project_cmd = app.add_subcommand("project", "parametric ensemble projection");
  add_common(project_cmd);
  auto* pipeline_cmd = app.add_subcommand("pipeline", "graph synthesis, generation, calibration and V&V");
  add_common(pipeline_cmd);
  pipeline_cmd->add_option("--planner", m.planner, "scripted:<path> or llm")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kOk : kError;
  }

  try {
    if (*verify) return cmd_verify_graph(m, out);
    if (*compile_cmd) return cmd_compile(m, out);
    if (*simulate_cmd) return cmd_simulate(m, out);
    if (*calibrate_cmd) return cmd_calibrate(m, out);
    if (*validate_cmd) return cmd_validate(m, out);
    if (*project_cmd) return cmd_project(m, out);
    if (*pipeline_cmd) return cmd_pipeline(m, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kError;
  }
  return kError;
}

}  // namespace epiagent::cli
