#pragma once

// Deterministic verification and validation of simulated trajectories,
// calibrated parameters and cross-scenario behaviour, plus the feedback
// generator that turns failed checks into revision requests.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "epiagent/compiler.hpp"
#include "epiagent/error.hpp"
#include "epiagent/feedback.hpp"
#include "epiagent/scenario.hpp"
#include "epiagent/simulator.hpp"

namespace epiagent {

struct VnvTolerances {
  double state_nonneg = 1e-9;
  double mass = 1e-8;
  double monotone = 1e-9;
  double ordering = 1e-3;
  double stall_fraction = 0.2;
  double stall_improvement = 1e-4;
};

enum class CheckId { NonnegState, MassConservation, CumMonotone, ParamNonneg, NumStable, GraphCodeConsistent };

inline std::string check_name(CheckId id) {
  switch (id) {
    case CheckId::NonnegState: return "NONNEG_STATE";
    case CheckId::MassConservation: return "MASS_CONSERVATION";
    case CheckId::CumMonotone: return "CUM_MONOTONE";
    case CheckId::ParamNonneg: return "PARAM_NONNEG";
    case CheckId::NumStable: return "NUM_STABLE";
    case CheckId::GraphCodeConsistent: return "GRAPH_CODE_CONSISTENT";
  }
  return "?";
}

struct Check {
  CheckId id;
  bool passed = true;
  std::string evidence;
  // First offending location, when the check is about states/outputs.
  std::optional<std::size_t> step;
  std::optional<std::size_t> slot;
  std::optional<double> value;
};

struct VerificationReport {
  std::vector<Check> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }

  const Check* find(CheckId id) const {
    for (const auto& c : checks)
      if (c.id == id) return &c;
    return nullptr;
  }

  std::vector<CheckId> failed() const {
    std::vector<CheckId> out;
    for (const auto& c : checks)
      if (!c.passed) out.push_back(c.id);
    return out;
  }

  VerificationReport& merge(const VerificationReport& other) {
    checks.insert(checks.end(), other.checks.begin(), other.checks.end());
    return *this;
  }

  nlohmann::json to_json() const {
    auto out = nlohmann::json::array();
    for (const auto& c : checks)
      out.push_back({{"check_id", check_name(c.id)}, {"status", c.passed ? "Pass" : "Fail"}, {"evidence", c.evidence}});
    return out;
  }

  std::string summary() const {
    std::string out;
    for (const auto& c : checks) {
      out += (c.passed ? "  PASS " : "  FAIL ") + check_name(c.id);
      if (!c.passed) out += ": " + c.evidence;
      out += "\n";
    }
    return out;
  }
};

namespace detail {
inline std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}
}  // namespace detail

inline VerificationReport verify_trajectory(const Trajectory& traj, const StabilityFlag& flag,
                                            const VnvTolerances& tol = {}) {
  VerificationReport r;
  auto slot_name = [&](std::size_t s) {
    if (s < traj.layout.size()) return traj.layout[s].compartment + "@patch" + std::to_string(traj.layout[s].patch);
    return "slot" + std::to_string(s);
  };

  Check nonneg{CheckId::NonnegState};
  for (std::size_t n = 0; n < traj.states.size() && nonneg.passed; ++n)
    for (std::size_t s = 0; s < traj.states[n].size(); ++s)
      if (traj.states[n][s] < -tol.state_nonneg) {
        nonneg.passed = false;
        nonneg.step = n;
        nonneg.slot = s;
        nonneg.value = traj.states[n][s];
        nonneg.evidence = "step " + std::to_string(n) + ", " + slot_name(s) + " = " +
                          detail::fmt_double(traj.states[n][s]);
        break;
      }
  r.checks.push_back(nonneg);

  // Deceased is a state slot, so the per-patch total (living + D) stays one.
  Check mass{CheckId::MassConservation};
  const std::size_t P = std::max<std::size_t>(1, traj.patches());
  for (std::size_t n = 0; n < traj.states.size() && mass.passed; ++n) {
    std::vector<double> sums(P, 0.0);
    for (std::size_t s = 0; s < traj.states[n].size(); ++s)
      sums[s < traj.layout.size() ? traj.layout[s].patch : 0] += traj.states[n][s];
    for (std::size_t p = 0; p < P; ++p)
      if (!(std::abs(sums[p] - 1.0) <= tol.mass)) {
        mass.passed = false;
        mass.step = n;
        mass.value = sums[p];
        mass.evidence = "step " + std::to_string(n) + ", patch " + std::to_string(p) + " total mass " +
                        detail::fmt_double(sums[p]) + " (imbalance " + detail::fmt_double(sums[p] - 1.0) + ")";
        break;
      }
  }
  r.checks.push_back(mass);

  Check mono{CheckId::CumMonotone};
  const auto& w = traj.weekly;
  for (std::size_t t = 1; t < w.weeks && mono.passed; ++t)
    for (std::size_t p = 0; p < w.patches && mono.passed; ++p) {
      auto test = [&](const char* what, double prev, double cur) {
        if (mono.passed && cur < prev - tol.monotone) {
          mono.passed = false;
          mono.step = t + 1;  // week number
          mono.value = cur;
          mono.evidence = std::string("cumulative ") + what + " decreases at week " + std::to_string(t + 1) +
                          ", patch " + std::to_string(p) + " (" + detail::fmt_double(prev) + " -> " +
                          detail::fmt_double(cur) + ")";
        }
      };
      test("infections", w.infection(t - 1, p), w.infection(t, p));
      test("deaths", w.death(t - 1, p), w.death(t, p));
    }
  r.checks.push_back(mono);

  Check stable{CheckId::NumStable};
  stable.passed = flag.stable;
  if (!flag.stable) {
    stable.step = flag.first_bad_step;
    stable.evidence = flag.describe();
  }
  r.checks.push_back(stable);
  return r;
}

// Zero is admissible; negative rates fail and are never clipped.
inline VerificationReport verify_parameters(const ParameterSet& params) {
  Check c{CheckId::ParamNonneg};
  std::vector<std::string> negative;
  for (const auto& [name, e] : params.entries()) {
    if (const auto* k = std::get_if<Knots>(&e.value)) {
      for (std::size_t i = 0; i < k->values.size(); ++i)
        if (k->values[i] < 0.0) negative.push_back(name + "[" + std::to_string(i) + "]=" + detail::fmt_double(k->values[i]));
    } else if (std::get<double>(e.value) < 0.0) {
      negative.push_back(name + "=" + detail::fmt_double(std::get<double>(e.value)));
    }
  }
  if (!negative.empty()) {
    c.passed = false;
    std::string list;
    for (const auto& n : negative) list += (list.empty() ? "" : ", ") + n;
    c.evidence = "negative parameters: " + list +
                 "; this signals that the model structure must be revised, not that values should be clipped";
  }
  return {{c}};
}

// Re-derives the flow sparsity of the compiled model and compares it to
// the graph's transition set.
inline VerificationReport verify_graph_code(const CompiledModel& model) {
  Check c{CheckId::GraphCodeConsistent};
  std::set<std::pair<std::string, std::string>> expected;
  for (const auto& t : model.graph().transitions()) expected.emplace(t.source, t.target);
  const auto actual = model.structural_pairs();
  std::string diff;
  for (const auto& e : expected)
    if (!actual.count(e)) diff += " missing " + e.first + "->" + e.second + ";";
  for (const auto& a : actual)
    if (!expected.count(a)) diff += " extra " + a.first + "->" + a.second + ";";
  if (!diff.empty()) {
    c.passed = false;
    c.evidence = "compiled flows differ from graph:" + diff;
  }
  return {{c}};
}

// ---------------------------------------------------------------------------
// Validation

inline double scenario_metric(const Trajectory& traj, Metric metric) {
  const auto& w = traj.weekly;
  const auto& N = traj.populations;
  switch (metric) {
    case Metric::CumulativeInfections:
    case Metric::CumulativeDeaths: {
      if (w.weeks == 0) return std::numeric_limits<double>::quiet_NaN();
      double total = 0.0;
      for (std::size_t p = 0; p < w.patches; ++p)
        total += N[p] * (metric == Metric::CumulativeInfections ? w.infection(w.weeks - 1, p) : w.death(w.weeks - 1, p));
      return total;
    }
    case Metric::PeakInfections: {
      double peak = 0.0;
      for (const auto& row : traj.states) {
        double total = 0.0;
        for (std::size_t s = 0; s < row.size(); ++s)
          if (traj.layout[s].kind.is(CompartmentKind::Tag::I)) total += N[traj.layout[s].patch] * row[s];
        peak = std::max(peak, total);
      }
      return peak;
    }
  }
  return 0.0;
}

struct OrderingResult {
  Metric metric;
  std::string lower;
  std::string higher;
  double lower_value = 0.0;
  double higher_value = 0.0;
  double tolerance = 0.0;
  bool satisfied = false;
};

struct ValidationReport {
  enum class Status { Pass, Warn, Fail };
  std::vector<OrderingResult> orderings;
  bool scenario_collapse = false;
  double max_relative_spread = 0.0;
  Status status = Status::Pass;

  std::string status_name() const {
    switch (status) {
      case Status::Pass: return "Pass";
      case Status::Warn: return "Warn";
      case Status::Fail: return "Fail";
    }
    return "?";
  }

  nlohmann::json to_json() const {
    nlohmann::json out;
    out["status"] = status_name();
    out["scenario_collapse"] = scenario_collapse;
    out["max_relative_spread"] = max_relative_spread;
    out["orderings"] = nlohmann::json::array();
    for (const auto& o : orderings)
      out["orderings"].push_back({{"metric", metric_name(o.metric)},
                                  {"lower", o.lower},
                                  {"higher", o.higher},
                                  {"lower_value", o.lower_value},
                                  {"higher_value", o.higher_value},
                                  {"satisfied", o.satisfied}});
    return out;
  }

  std::string summary() const {
    std::string out = "  validation: " + status_name() + (scenario_collapse ? " (scenario collapse)" : "") + "\n";
    for (const auto& o : orderings)
      out += std::string("  ") + (o.satisfied ? "PASS " : "FAIL ") + metric_name(o.metric) + ": " + o.lower + " (" +
             detail::fmt_double(o.lower_value) + ") < " + o.higher + " (" + detail::fmt_double(o.higher_value) + ")\n";
    return out;
  }
};

inline double relative_difference(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

// satisfied iff metric(a) < metric(b) * (1 - tolerance). Collapse: every
// pairwise relative difference across all scenarios is below tolerance.
inline ValidationReport validate_scenarios(const std::map<std::string, Trajectory>& results,
                                           const std::vector<OrderingExpectation>& expectations,
                                           double default_tolerance = 1e-3) {
  ValidationReport r;
  std::set<Metric> metrics;
  double collapse_tol = expectations.empty() ? default_tolerance : std::numeric_limits<double>::infinity();
  for (const auto& e : expectations) {
    metrics.insert(e.metric);
    collapse_tol = std::min(collapse_tol, e.tolerance);
    for (const auto& [a, b] : e.relation) {
      for (const auto& id : {a, b})
        if (!results.count(id)) throw Error("validation: missing scenario '" + id + "'");
      OrderingResult o{e.metric, a, b, scenario_metric(results.at(a), e.metric),
                       scenario_metric(results.at(b), e.metric), e.tolerance, false};
      o.satisfied = o.lower_value < o.higher_value * (1.0 - e.tolerance);
      r.orderings.push_back(o);
    }
  }
  if (metrics.empty()) metrics.insert(Metric::CumulativeInfections);

  if (results.size() >= 2) {
    double spread = 0.0;
    for (Metric m : metrics) {
      std::vector<double> values;
      for (const auto& [_, traj] : results) values.push_back(scenario_metric(traj, m));
      for (std::size_t i = 0; i < values.size(); ++i)
        for (std::size_t j = i + 1; j < values.size(); ++j) {
          const double d = relative_difference(values[i], values[j]);
          spread = std::isnan(d) ? std::numeric_limits<double>::infinity() : std::max(spread, d);
        }
    }
    r.max_relative_spread = spread;
    r.scenario_collapse = spread < collapse_tol;
  }

  const bool violated =
      std::any_of(r.orderings.begin(), r.orderings.end(), [](const OrderingResult& o) { return !o.satisfied; });
  r.status = violated ? ValidationReport::Status::Fail
                      : (r.scenario_collapse ? ValidationReport::Status::Warn : ValidationReport::Status::Pass);
  return r;
}

// ---------------------------------------------------------------------------
// Feedback

// Stalled when the loss improved by less than `min_improvement` (relative)
// over the last `fraction` of the history.
inline bool loss_stalled(const std::vector<double>& history, double fraction = 0.2, double min_improvement = 1e-4) {
  if (history.size() < 2) return false;
  const auto window = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(history.size())));
  const double start = history[history.size() - 1 - std::min(window, history.size() - 1)];
  const double end = history.back();
  if (!(start > 0.0)) return false;
  return (start - end) / start < min_improvement;
}

inline FeedbackMessage generate_feedback(const VerificationReport& verification, const ValidationReport& validation,
                                         const std::vector<double>& loss_history, const VnvTolerances& tol = {}) {
  FeedbackMessage m;
  m.source = FeedbackMessage::Source::Performance;
  if (!validation.orderings.empty() || validation.scenario_collapse) {
    if (validation.status != ValidationReport::Status::Pass) m.source = FeedbackMessage::Source::Validation;
  }
  if (!verification.passed()) m.source = FeedbackMessage::Source::Verification;

  for (const auto& c : verification.checks) {
    if (c.passed) continue;
    FeedbackItem item;
    switch (c.id) {
      case CheckId::NonnegState:
        item.finding = "negative state at " + c.evidence;
        item.suggestion = "check for outflows that can exceed the compartment's mass and for missing inflows";
        break;
      case CheckId::MassConservation:
        item.finding = "mass imbalance at " + c.evidence;
        item.suggestion = "every flow must leave its source and enter its target exactly once";
        break;
      case CheckId::CumMonotone:
        item.finding = c.evidence;
        item.suggestion = "check sign of flows into D and into the incidence compartment";
        break;
      case CheckId::ParamNonneg:
        item.finding = c.evidence;
        item.suggestion = "revise the transitions governed by the negative parameters";
        break;
      case CheckId::NumStable:
        item.finding = "numerical instability: " + c.evidence;
        item.suggestion = "reduce rates that make the explicit step diverge";
        break;
      case CheckId::GraphCodeConsistent:
        item.finding = c.evidence;
        item.suggestion = "the compiled flows must match the verified graph";
        break;
    }
    item.finding = check_name(c.id) + ": " + item.finding;
    m.items.push_back(std::move(item));
  }
  for (const auto& o : validation.orderings) {
    if (o.satisfied) continue;
    m.items.push_back({"ORDERING: expected " + metric_name(o.metric) + "(" + o.lower + ") < " + metric_name(o.metric) +
                           "(" + o.higher + "), got " + detail::fmt_double(o.lower_value) + " vs " +
                           detail::fmt_double(o.higher_value),
                       "add or revise the mechanism that distinguishes " + o.lower + " from " + o.higher});
  }
  if (validation.scenario_collapse)
    m.items.push_back({"SCENARIO_COLLAPSE: all scenarios produce indistinguishable outputs",
                       "scenario controls do not reach the dynamics; a mechanism is missing"});

  const bool stalled = loss_stalled(loss_history, tol.stall_fraction, tol.stall_improvement);
  if (!loss_history.empty()) m.loss_summary = LossSummary{loss_history.back(), stalled};
  if (stalled)
    m.items.push_back({"calibration loss stalled over the last " +
                           std::to_string(static_cast<int>(tol.stall_fraction * 100)) + "% of steps",
                       "revise the model structure or parameterization (e.g. time-varying rates)"});
  if (m.items.empty()) m.loss_summary.reset();
  return m;
}

}  // namespace epiagent
