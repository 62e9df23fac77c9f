#pragma once

// The generate-verify-calibrate-validate loop over a pluggable planner.
//
// Stage I (graph_loop) asks the planner for flow graphs until one passes
// structural verification. Stage II/III (generation_loop) asks for model
// specs, compiles them against every scenario, calibrates, and runs V&V;
// failures are fed back into the prompt as appended text.

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "epiagent/calibration.hpp"
#include "epiagent/compiler.hpp"
#include "epiagent/flowgraph.hpp"
#include "epiagent/planner.hpp"
#include "epiagent/prompt.hpp"
#include "epiagent/retrieval.hpp"
#include "epiagent/scenario.hpp"
#include "epiagent/simulator.hpp"
#include "epiagent/vnv.hpp"

namespace epiagent {

struct LoopConfig {
  std::size_t max_graph_iters = 5;
  std::size_t max_code_retries = 3;
  std::size_t max_generations = 4;
  double temperature_step = 0.3;
  double accept_loss = 1e-4;
  bool verify_graphs = true;
  std::size_t retrieval_k = 5;

  void check() const {
    if (max_graph_iters == 0 || max_generations == 0) throw Error("loop budgets must be positive");
    if (!(temperature_step > 0.0)) throw Error("temperature_step must be positive");
    if (!(accept_loss > 0.0)) throw Error("accept_loss must be positive");
    if (retrieval_k == 0) throw Error("retrieval.k must be positive");
  }
};

struct SimulationSettings {
  double dt_days = 1.0;
  std::size_t horizon_weeks = 52;
};

// Append-only JSON-lines audit trail of a run.
class Transcript {
 public:
  Transcript() = default;
  explicit Transcript(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw Error("cannot open transcript '" + path + "'");
  }

  void record(nlohmann::json entry) {
    entry["seq"] = entries_.size();
    if (out_.is_open()) {
      out_ << entry.dump() << "\n";
      out_.flush();
    }
    entries_.push_back(std::move(entry));
  }

  const std::vector<nlohmann::json>& entries() const { return entries_; }

  std::vector<nlohmann::json> events(const std::string& type) const {
    std::vector<nlohmann::json> out;
    for (const auto& e : entries_)
      if (e.value("event", "") == type) out.push_back(e);
    return out;
  }

 private:
  std::vector<nlohmann::json> entries_;
  std::ofstream out_;
};

// True iff the latest fingerprint repeats an earlier one, or the last four
// alternate with period two (a b a b).
inline bool detect_repetition(const std::vector<std::string>& fingerprints) {
  const std::size_t n = fingerprints.size();
  if (n < 2) return false;
  const auto& last = fingerprints.back();
  for (std::size_t i = 0; i + 1 < n; ++i)
    if (fingerprints[i] == last) return true;
  if (n >= 4) {
    const auto& a = fingerprints[n - 4];
    const auto& b = fingerprints[n - 3];
    return a != b && fingerprints[n - 2] == a && fingerprints[n - 1] == b;
  }
  return false;
}

inline std::string scenarios_text(const std::vector<Scenario>& scenarios) {
  std::string out;
  for (const auto& s : scenarios) out += "[" + s.id + "] " + s.description + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Stage I

struct GraphAttempt {
  std::size_t attempt = 0;
  double temperature = 0.0;
  std::string fingerprint;
  bool repeated = false;
  std::optional<std::string> parse_error;
  std::optional<GraphVerdict> verdict;  // absent when parsing failed or verification is disabled
};

struct GraphLoopResult {
  enum class Outcome { Verified, Unverified, BudgetExhausted, PlannerFailure };
  Outcome outcome = Outcome::BudgetExhausted;
  std::optional<FlowGraph> graph;
  std::vector<GraphAttempt> history;
  PromptBundle final_prompt;
  std::string error;
  std::size_t planner_calls = 0;

  bool ok() const { return outcome == Outcome::Verified || outcome == Outcome::Unverified; }
};

// The temperature starts at zero for every run and rises by one step after
// each rejected attempt; repeats are flagged in the history.
inline GraphLoopResult graph_loop(const std::vector<Scenario>& scenarios, const std::vector<CorpusDocument>& corpus,
                                  Planner& planner, const LoopConfig& config, Transcript* transcript = nullptr) {
  config.check();
  GraphLoopResult r;
  const std::string text = scenarios_text(scenarios);
  auto passages = make_passages(retrieve(text, corpus, config.retrieval_k), corpus);
  PromptBundle prompt = build_prompt(text, passages);
  std::vector<std::string> fingerprints;
  double temperature = 0.0;

  for (std::size_t attempt = 1; attempt <= config.max_graph_iters; ++attempt) {
    GraphAttempt rec;
    rec.attempt = attempt;
    rec.temperature = temperature;
    PlannerResponse resp;
    try {
      ++r.planner_calls;
      resp = planner.propose({Phase::GraphSynthesis, prompt, temperature, attempt});
    } catch (const PlannerError& e) {
      r.outcome = GraphLoopResult::Outcome::PlannerFailure;
      r.error = e.what();
      if (transcript) transcript->record({{"event", "planner_failure"}, {"phase", "graph"}, {"error", r.error}});
      r.final_prompt = prompt;
      return r;
    }
    rec.fingerprint = resp.fingerprint;
    fingerprints.push_back(resp.fingerprint);
    rec.repeated = detect_repetition(fingerprints);

    nlohmann::json log = {{"event", "graph_attempt"},
                          {"attempt", attempt},
                          {"temperature", temperature},
                          {"fingerprint", resp.fingerprint},
                          {"repeated", rec.repeated}};
    std::optional<FlowGraph> graph;
    try {
      graph = parse_graph(resp.payload);
    } catch (const ParseError& e) {
      rec.parse_error = e.what();
    }

    FeedbackMessage feedback;
    if (graph && config.verify_graphs) {
      rec.verdict = validate_structure(*graph);
      log["verdict"] = rec.verdict->passed() ? "Pass" : "Fail";
      const auto ids = rec.verdict->rule_ids();
      log["violations"] = std::vector<std::string>(ids.begin(), ids.end());
      if (rec.verdict->passed()) {
        r.outcome = GraphLoopResult::Outcome::Verified;
        r.graph = std::move(graph);
      } else {
        feedback = graph_feedback(*rec.verdict);
      }
    } else if (graph) {
      log["verdict"] = "Skipped";
      r.outcome = GraphLoopResult::Outcome::Unverified;
      r.graph = std::move(graph);
    } else {
      log["verdict"] = "ParseError";
      log["error"] = *rec.parse_error;
      feedback.items.push_back({"document could not be parsed: " + *rec.parse_error,
                                "emit a single flow-graph document following the skeleton"});
    }
    r.history.push_back(rec);
    if (r.graph) {
      if (transcript) transcript->record(log);
      r.final_prompt = prompt;
      return r;
    }
    log["feedback"] = feedback.render();
    if (transcript) transcript->record(log);
    prompt = append_feedback(std::move(prompt), feedback);
    temperature += config.temperature_step;
  }
  r.outcome = GraphLoopResult::Outcome::BudgetExhausted;
  r.error = "graph iteration budget exhausted after " + std::to_string(config.max_graph_iters) + " attempts";
  r.final_prompt = prompt;
  if (transcript) transcript->record({{"event", "graph_budget_exhausted"}, {"attempts", config.max_graph_iters}});
  return r;
}

// ---------------------------------------------------------------------------
// Stage II/III

struct GenerationInputs {
  FlowGraph graph;
  bool graph_verified = true;
  std::vector<Scenario> scenarios;
  Dataset dataset;  // keyed by scenario id; scenarios without data are only simulated
  PatchStructure patches = PatchStructure::single();
  std::vector<Passage> passages;
  bool row_normalize_contacts = false;
};

struct Candidate {
  std::size_t generation = 0;
  ModelSpec spec;
  std::vector<std::string> names;
  std::vector<double> theta;
  CalibrationResult calibration;
  std::map<std::string, VerificationReport> verification;  // per scenario
  ValidationReport validation;
  std::map<std::string, Trajectory> trajectories;
  double loss = std::numeric_limits<double>::infinity();
  bool vnv_passed = false;
};

struct RunArtifacts {
  enum class Outcome { Accepted, NotConverged, NoPassingCandidate, PlannerFailure };
  Outcome outcome = Outcome::NoPassingCandidate;
  std::optional<FlowGraph> graph;
  std::vector<GraphAttempt> graph_history;
  std::vector<Candidate> candidates;
  std::optional<std::size_t> selected;  // index into candidates
  std::vector<std::string> feedback_transcript;
  bool accepted = false;
  std::optional<std::size_t> accepted_generation;
  std::size_t planner_calls = 0;
  std::string error;

  const Candidate* best() const { return selected ? &candidates[*selected] : nullptr; }
};

inline std::string outcome_name(RunArtifacts::Outcome o) {
  switch (o) {
    case RunArtifacts::Outcome::Accepted: return "accepted";
    case RunArtifacts::Outcome::NotConverged: return "not_converged";
    case RunArtifacts::Outcome::NoPassingCandidate: return "no_passing_candidate";
    case RunArtifacts::Outcome::PlannerFailure: return "planner_failure";
  }
  return "?";
}

inline RunArtifacts generation_loop(const GenerationInputs& in, Planner& planner, const LoopConfig& config,
                                    const CalibrationConfig& calib, const VnvTolerances& tol,
                                    const SimulationSettings& sim, Transcript* transcript = nullptr) {
  config.check();
  RunArtifacts out;
  out.graph = in.graph;
  PromptBundle prompt =
      build_prompt(scenarios_text(in.scenarios) + "\nVerified flow graph:\n" + serialize_graph(in.graph), in.passages);
  std::vector<std::string> fingerprints;
  double temperature = 0.0;
  auto log = [&](nlohmann::json e) {
    if (transcript) transcript->record(std::move(e));
  };

  for (std::size_t g = 1; g <= config.max_generations; ++g) {
    std::optional<ModelSpec> spec;
    std::vector<CompiledModel> models;
    CalibrationProblem problem;
    problem.dt_days = sim.dt_days;

    for (std::size_t attempt = 0; attempt <= config.max_code_retries && !spec; ++attempt) {
      PlannerResponse resp;
      try {
        ++out.planner_calls;
        resp = planner.propose({Phase::ModelSpec, prompt, temperature, attempt + 1});
      } catch (const PlannerError& e) {
        out.outcome = RunArtifacts::Outcome::PlannerFailure;
        out.error = e.what();
        log({{"event", "planner_failure"}, {"phase", "model_spec"}, {"error", out.error}});
        return out;
      }
      fingerprints.push_back(resp.fingerprint);
      const bool repeated = detect_repetition(fingerprints);
      nlohmann::json entry = {{"event", "spec_attempt"},       {"generation", g},
                              {"attempt", attempt + 1},        {"temperature", temperature},
                              {"fingerprint", resp.fingerprint}, {"repeated", repeated}};
      if (repeated) temperature += config.temperature_step;
      try {
        ModelSpec candidate = parse_model_spec(resp.payload);
        models.clear();
        problem.scenarios.clear();
        CompileOptions opts;
        opts.allow_unverified = !in.graph_verified;
        opts.row_normalize_contacts = in.row_normalize_contacts;
        opts.schedule_bindings = candidate.schedule_bindings;
        for (const auto& s : in.scenarios) {
          log({{"event", "compile"}, {"generation", g}, {"scenario", s.id}, {"graph_verified", in.graph_verified}});
          auto model = compile(in.graph, s, in.patches, candidate.params, opts);
          auto x0 = make_initial_condition(model, s.initial);
          check_initial_condition(model, x0);
          models.push_back(model);
          if (auto it = in.dataset.find(s.id); it != in.dataset.end())
            problem.scenarios.push_back({model, x0, it->second});
        }
        if (problem.scenarios.empty()) throw CalibrationError("no scenario has observed data");
        total_loss(problem, candidate.params.flatten());
        spec = std::move(candidate);
        entry["status"] = "ok";
        log(entry);
      } catch (const Error& e) {
        const std::string trace = std::string("error trace (generation ") + std::to_string(g) + ", attempt " +
                                  std::to_string(attempt + 1) + "):\n" + e.what() + "\n";
        entry["status"] = "error";
        entry["error"] = e.what();
        log(entry);
        out.feedback_transcript.push_back(trace);
        prompt = append_text(std::move(prompt), trace);
      }
    }
    if (!spec) continue;

    Candidate c;
    c.generation = g;
    c.spec = *spec;
    c.names = spec->params.flat_names();
    try {
      c.calibration = calibrate(problem, spec->params.flatten(), calib);
    } catch (const CalibrationError& e) {
      const std::string trace = "error trace (generation " + std::to_string(g) + ", calibration):\n" + e.what() + "\n";
      out.feedback_transcript.push_back(trace);
      prompt = append_text(std::move(prompt), trace);
      log({{"event", "calibration_error"}, {"generation", g}, {"error", e.what()}});
      continue;
    }
    c.theta = c.calibration.theta_star;
    c.loss = c.calibration.final_loss;

    VerificationReport all;
    const auto named = spec->params.with_values(c.theta);
    const auto param_report = verify_parameters(named);
    for (std::size_t i = 0; i < in.scenarios.size(); ++i) {
      const auto& s = in.scenarios[i];
      auto x0 = make_initial_condition(models[i], s.initial);
      std::size_t weeks = sim.horizon_weeks;
      if (auto it = in.dataset.find(s.id); it != in.dataset.end()) weeks = std::max(weeks, it->second.weeks);
      auto res = simulate(BoundModel(models[i], c.theta), x0, weeks, sim.dt_days);
      VerificationReport rep = verify_trajectory(res.trajectory, res.stability, tol);
      rep.merge(param_report).merge(verify_graph_code(models[i]));
      all.merge(rep);
      c.verification[s.id] = rep;
      c.trajectories[s.id] = std::move(res.trajectory);
    }
    c.validation = validate_scenarios(c.trajectories, collect_expectations(in.scenarios), tol.ordering);
    c.vnv_passed = all.passed() && c.validation.status == ValidationReport::Status::Pass;

    nlohmann::json vlog = {{"event", "vnv"},
                           {"generation", g},
                           {"loss", c.loss},
                           {"verification", all.passed() ? "Pass" : "Fail"},
                           {"validation", c.validation.status_name()}};
    auto failed = all.failed();
    std::vector<std::string> failed_names;
    for (auto id : failed) failed_names.push_back(check_name(id));
    vlog["failed_checks"] = failed_names;
    log(vlog);
    out.candidates.push_back(std::move(c));
    const auto& cand = out.candidates.back();

    if (cand.vnv_passed && cand.loss < config.accept_loss) {
      out.accepted = true;
      out.accepted_generation = g;
      out.selected = out.candidates.size() - 1;
      out.outcome = RunArtifacts::Outcome::Accepted;
      log({{"event", "accepted"}, {"generation", g}});
      return out;
    }
    auto fb = generate_feedback(all, cand.validation, cand.calibration.loss_history, tol);
    if (fb.empty() && cand.loss >= config.accept_loss)
      fb.items.push_back({"calibration loss above the acceptance threshold",
                          "revise the parameterization (e.g. time-varying rates)"});
    fb.loss_summary = LossSummary{cand.loss, loss_stalled(cand.calibration.loss_history, tol.stall_fraction,
                                                          tol.stall_improvement)};
    out.feedback_transcript.push_back(fb.render());
    log({{"event", "feedback"}, {"generation", g}, {"text", fb.render()}});
    prompt = append_feedback(std::move(prompt), fb);
  }

  // Best-by-loss among V&V-passing candidates, flagged as not converged.
  for (std::size_t i = 0; i < out.candidates.size(); ++i) {
    const auto& c = out.candidates[i];
    if (c.vnv_passed && (!out.selected || c.loss < out.candidates[*out.selected].loss)) out.selected = i;
  }
  out.outcome = out.selected ? RunArtifacts::Outcome::NotConverged : RunArtifacts::Outcome::NoPassingCandidate;
  log({{"event", "finished"}, {"outcome", outcome_name(out.outcome)}});
  return out;
}

}  // namespace epiagent
