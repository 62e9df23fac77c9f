#pragma once

// Scenario specifications: parameter overrides, exogenous schedules,
// initial conditions and cross-scenario ordering expectations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "epiagent/error.hpp"
#include "epiagent/flowgraph.hpp"

namespace epiagent {

enum class Interpolation { PiecewiseConstant, PiecewiseLinear };

// Exogenous signal indexed by week. Outside the knot range the end values hold.
struct Schedule {
  std::vector<double> times;
  std::vector<double> values;
  Interpolation interpolation = Interpolation::PiecewiseConstant;

  void check(const std::string& where) const {
    if (times.empty()) throw ParseError(where + ": schedule needs at least one knot");
    if (times.size() != values.size()) throw ParseError(where + ": times and values differ in length");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (!(times[i] > times[i - 1])) throw ParseError(where + ": schedule times must be strictly increasing");
    for (double v : values) {
      if (!std::isfinite(v)) throw ParseError(where + ": schedule value is not finite");
      if (v < 0.0) throw ParseError(where + ": negative schedule value");
    }
  }

  double at(double week) const {
    if (week <= times.front()) return values.front();
    if (week >= times.back()) return values.back();
    auto it = std::upper_bound(times.begin(), times.end(), week);
    const auto hi = static_cast<std::size_t>(it - times.begin());
    const auto lo = hi - 1;
    if (interpolation == Interpolation::PiecewiseConstant) return values[lo];
    const double w = (week - times[lo]) / (times[hi] - times[lo]);
    return values[lo] + w * (values[hi] - values[lo]);
  }

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

enum class Metric { CumulativeInfections, CumulativeDeaths, PeakInfections };

inline std::string metric_name(Metric m) {
  switch (m) {
    case Metric::CumulativeInfections: return "cumulative_infections";
    case Metric::CumulativeDeaths: return "cumulative_deaths";
    case Metric::PeakInfections: return "peak_infections";
  }
  return "?";
}

inline Metric parse_metric(const std::string& s) {
  if (s == "cumulative_infections") return Metric::CumulativeInfections;
  if (s == "cumulative_deaths") return Metric::CumulativeDeaths;
  if (s == "peak_infections") return Metric::PeakInfections;
  throw ParseError("unknown ordering metric '" + s + "'");
}

// Each pair (a, b) asserts metric(a) < metric(b).
struct OrderingExpectation {
  Metric metric = Metric::CumulativeInfections;
  std::vector<std::pair<std::string, std::string>> relation;
  double tolerance = 1e-3;
};

using Override = std::variant<double, Schedule>;

// Fractions keyed by compartment id. One map applies to every patch; a
// per-patch list gives one map per patch.
struct InitialFractions {
  std::vector<std::map<std::string, double>> per_patch;
  bool empty() const { return per_patch.empty(); }
};

struct Scenario {
  std::string id;
  std::string description;
  std::map<std::string, Override> overrides;
  std::map<std::string, Schedule> schedules;
  std::vector<OrderingExpectation> expected_orderings;
  InitialFractions initial;
};

// ---------------------------------------------------------------------------

namespace detail {

inline Schedule schedule_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ParseError(where + ": expected {times, values, interpolation}");
  Schedule s;
  try {
    s.times = require(j, "times", where).get<std::vector<double>>();
    s.values = require(j, "values", where).get<std::vector<double>>();
  } catch (const nlohmann::json::type_error&) {
    throw ParseError(where + ": times/values must be numeric lists");
  }
  const std::string interp = j.value("interpolation", std::string("piecewise-constant"));
  if (interp == "piecewise-constant") s.interpolation = Interpolation::PiecewiseConstant;
  else if (interp == "piecewise-linear") s.interpolation = Interpolation::PiecewiseLinear;
  else throw ParseError(where + ".interpolation: unknown interpolation '" + interp + "'");
  s.check(where);
  return s;
}

inline nlohmann::json schedule_to_json(const Schedule& s) {
  return {{"times", s.times},
          {"values", s.values},
          {"interpolation",
           s.interpolation == Interpolation::PiecewiseLinear ? "piecewise-linear" : "piecewise-constant"}};
}

inline Scenario scenario_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ParseError(where + ": scenario must be an object");
  Scenario s;
  s.id = require_string(j, "id", where);
  if (s.id.empty()) throw ParseError(where + ".id: empty scenario id");
  s.description = j.value("description", std::string());
  if (j.contains("overrides")) {
    for (const auto& [name, v] : j.at("overrides").items()) {
      if (name.empty()) throw ParseError(where + ".overrides: empty parameter name");
      const std::string w = where + ".overrides." + name;
      if (v.is_number()) {
        if (!std::isfinite(v.get<double>())) throw ParseError(w + ": not finite");
        s.overrides.emplace(name, v.get<double>());
      } else {
        s.overrides.emplace(name, schedule_from_json(v, w));
      }
    }
  }
  if (j.contains("schedules")) {
    for (const auto& [name, v] : j.at("schedules").items()) {
      if (name.empty()) throw ParseError(where + ".schedules: empty schedule name");
      s.schedules.emplace(name, schedule_from_json(v, where + ".schedules." + name));
    }
  }
  if (j.contains("expected_orderings")) {
    for (const auto& e : j.at("expected_orderings")) {
      OrderingExpectation oe;
      oe.metric = parse_metric(require_string(e, "metric", where + ".expected_orderings"));
      for (const auto& pair : require(e, "relation", where + ".expected_orderings")) {
        if (!pair.is_array() || pair.size() != 2)
          throw ParseError(where + ".expected_orderings.relation: each entry must be a pair [a, b]");
        oe.relation.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
      }
      oe.tolerance = e.value("tolerance", 1e-3);
      if (!(oe.tolerance >= 0.0)) throw ParseError(where + ".expected_orderings.tolerance: must be >= 0");
      s.expected_orderings.push_back(std::move(oe));
    }
  }
  if (j.contains("initial_conditions")) {
    const auto& ic = j.at("initial_conditions");
    auto one = [&](const nlohmann::json& m) {
      std::map<std::string, double> out;
      for (const auto& [k, v] : m.items()) out[k] = v.get<double>();
      return out;
    };
    if (ic.is_array())
      for (const auto& m : ic) s.initial.per_patch.push_back(one(m));
    else
      s.initial.per_patch.push_back(one(ic));
  }
  return s;
}

// Rejects cycles in the union of all ordering relations, per metric.
inline void check_orderings_acyclic(const std::vector<Scenario>& scenarios) {
  std::map<Metric, std::map<std::string, std::set<std::string>>> edges;
  for (const auto& s : scenarios)
    for (const auto& oe : s.expected_orderings)
      for (const auto& [a, b] : oe.relation) {
        if (a == b) throw ParseError("cyclic ordering expectation: " + a + " < " + a);
        edges[oe.metric][a].insert(b);
      }
  for (const auto& [metric, adj] : edges) {
    std::map<std::string, int> state;  // 0 new, 1 on stack, 2 done
    std::function<void(const std::string&)> dfs = [&](const std::string& u) {
      state[u] = 1;
      if (auto it = adj.find(u); it != adj.end())
        for (const auto& v : it->second) {
          if (state[v] == 1)
            throw ParseError("cyclic ordering expectation on " + metric_name(metric) + " involving " + u +
                             " and " + v);
          if (state[v] == 0) dfs(v);
        }
      state[u] = 2;
    };
    for (const auto& [u, _] : adj)
      if (state[u] == 0) dfs(u);
  }
}

}  // namespace detail

// Accepts a single scenario object or {"scenarios": [...]}.
inline std::vector<Scenario> parse_scenarios(const std::string& text) {
  const auto doc = detail::parse_json_text(text);
  std::vector<Scenario> out;
  if (doc.is_object() && doc.contains("scenarios")) {
    const auto& list = doc.at("scenarios");
    if (!list.is_array()) throw ParseError("scenarios: expected a list");
    for (std::size_t i = 0; i < list.size(); ++i)
      out.push_back(detail::scenario_from_json(list[i], "scenarios[" + std::to_string(i) + "]"));
  } else {
    out.push_back(detail::scenario_from_json(doc, "scenario"));
  }
  std::set<std::string> ids;
  for (const auto& s : out)
    if (!ids.insert(s.id).second) throw ParseError("duplicate scenario id '" + s.id + "'");
  detail::check_orderings_acyclic(out);
  return out;
}

inline Scenario parse_scenario(const std::string& text) {
  auto all = parse_scenarios(text);
  if (all.size() != 1) throw ParseError("expected exactly one scenario, found " + std::to_string(all.size()));
  return std::move(all.front());
}

// All ordering expectations declared across a scenario set.
inline std::vector<OrderingExpectation> collect_expectations(const std::vector<Scenario>& scenarios) {
  std::vector<OrderingExpectation> out;
  for (const auto& s : scenarios) out.insert(out.end(), s.expected_orderings.begin(), s.expected_orderings.end());
  return out;
}

}  // namespace epiagent
