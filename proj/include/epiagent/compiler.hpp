#pragma once

// Compiles a verified flow graph plus a scenario into a patch-stratified
// ODE system over population fractions.
//
// State layout: slot p*K + k holds compartment k of patch p. The extended
// state appends two accumulators per patch (cumulative infections, then
// cumulative deaths) after the K*P compartment slots.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "epiagent/error.hpp"
#include "epiagent/flowgraph.hpp"
#include "epiagent/scenario.hpp"

namespace epiagent {

struct PatchStructure {
  std::vector<std::string> ids;
  std::vector<double> populations;
  std::vector<std::vector<double>> contact;  // empty means identity

  static PatchStructure single(double population = 1.0) { return {{"0"}, {population}, {}}; }

  std::size_t size() const { return populations.size(); }

  double contact_at(std::size_t p, std::size_t q) const {
    if (contact.empty()) return p == q ? 1.0 : 0.0;
    return contact[p][q];
  }

  void check() const {
    if (populations.empty()) throw CompileError("patch structure needs at least one patch");
    if (ids.size() != populations.size()) throw CompileError("patch ids and populations differ in length");
    for (double n : populations)
      if (!(n > 0.0) || !std::isfinite(n)) throw CompileError("patch populations must be positive");
    if (!contact.empty()) {
      if (contact.size() != size()) throw CompileError("contact matrix must have one row per patch");
      for (const auto& row : contact) {
        if (row.size() != size()) throw CompileError("contact matrix must be square (P x P)");
        for (double c : row)
          if (!(c >= 0.0) || !std::isfinite(c)) throw CompileError("contact matrix entries must be >= 0");
      }
    }
  }
};

// Piecewise-linear trajectory of a parameter over weeks.
struct Knots {
  std::vector<double> times;
  std::vector<double> values;
  friend bool operator==(const Knots&, const Knots&) = default;
};

struct ParamEntry {
  std::variant<double, Knots> value;
  bool trainable = true;

  std::size_t dof() const {
    if (!trainable) return 0;
    if (const auto* k = std::get_if<Knots>(&value)) return k->values.size();
    return 1;
  }
};

// Named disease parameters. The flat vector orders trainable entries by
// name, then by knot index.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(std::map<std::string, ParamEntry> entries) : entries_(std::move(entries)) {
    for (const auto& [name, e] : entries_) {
      if (name.empty()) throw ParseError("parameters: empty parameter name");
      if (const auto* k = std::get_if<Knots>(&e.value)) {
        if (k->times.empty() || k->times.size() != k->values.size())
          throw ParseError("parameters." + name + ": knot times and values must be nonempty and equal length");
        for (std::size_t i = 1; i < k->times.size(); ++i)
          if (!(k->times[i] > k->times[i - 1]))
            throw ParseError("parameters." + name + ": knot times must be strictly increasing");
      }
    }
  }

  const std::map<std::string, ParamEntry>& entries() const { return entries_; }
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const ParamEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t dof() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.dof();
    return n;
  }

  std::size_t flat_index(const std::string& name, std::optional<std::size_t> knot = std::nullopt) const {
    std::size_t offset = 0;
    for (const auto& [n, e] : entries_) {
      if (n == name) {
        if (!e.trainable) throw Error("parameter '" + name + "' is not trainable");
        if (const auto* k = std::get_if<Knots>(&e.value)) {
          if (!knot) throw Error("parameter '" + name + "' is time-varying; a knot index is required");
          if (*knot >= k->values.size())
            throw Error("knot " + std::to_string(*knot) + " out of range for '" + name + "'");
          return offset + *knot;
        }
        if (knot && *knot != 0) throw Error("parameter '" + name + "' is constant; knot out of range");
        return offset;
      }
      offset += e.dof();
    }
    throw Error("unknown parameter '" + name + "'");
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    for (const auto& [_, e] : entries_) {
      if (!e.trainable) continue;
      if (const auto* k = std::get_if<Knots>(&e.value))
        out.insert(out.end(), k->values.begin(), k->values.end());
      else
        out.push_back(std::get<double>(e.value));
    }
    return out;
  }

  // "beta" for constants, "beta[2]" for knot 2.
  std::vector<std::string> flat_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_) {
      if (!e.trainable) continue;
      if (const auto* k = std::get_if<Knots>(&e.value))
        for (std::size_t i = 0; i < k->values.size(); ++i) out.push_back(name + "[" + std::to_string(i) + "]");
      else
        out.push_back(name);
    }
    return out;
  }

  ParameterSet with_values(std::span<const double> theta) const {
    if (theta.size() != dof())
      throw Error("parameter vector has length " + std::to_string(theta.size()) + ", expected " +
                  std::to_string(dof()));
    ParameterSet out = *this;
    std::size_t i = 0;
    for (auto& [_, e] : out.entries_) {
      if (!e.trainable) continue;
      if (auto* k = std::get_if<Knots>(&e.value))
        for (auto& v : k->values) v = theta[i++];
      else
        e.value = theta[i++];
    }
    return out;
  }

 private:
  std::map<std::string, ParamEntry> entries_;
};

// Planner-proposed parameterization: the parameter set plus optional
// renaming of graph schedules onto scenario schedules.
struct ModelSpec {
  ParameterSet params;
  std::map<std::string, std::string> schedule_bindings;
};

inline ParameterSet parameters_from_json(const nlohmann::json& j) {
  const nlohmann::json& body = j.contains("parameters") ? j.at("parameters") : j;
  if (!body.is_object()) throw ParseError("parameters: expected an object");
  std::map<std::string, ParamEntry> entries;
  for (const auto& [name, v] : body.items()) {
    const std::string where = "parameters." + name;
    ParamEntry e;
    if (v.is_number()) {
      e.value = v.get<double>();
    } else if (v.is_object() && v.contains("knots")) {
      const auto& k = v.at("knots");
      Knots knots;
      knots.times = detail::require(k, "times", where + ".knots").get<std::vector<double>>();
      knots.values = detail::require(k, "values", where + ".knots").get<std::vector<double>>();
      e.value = std::move(knots);
      e.trainable = v.value("trainable", true);
    } else if (v.is_object() && v.contains("value")) {
      e.value = v.at("value").get<double>();
      e.trainable = v.value("trainable", true);
    } else {
      throw ParseError(where + ": expected a number, {value} or {knots}");
    }
    entries.emplace(name, std::move(e));
  }
  return ParameterSet(std::move(entries));
}

inline nlohmann::json to_json(const ParameterSet& ps) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, e] : ps.entries()) {
    nlohmann::json v;
    if (const auto* k = std::get_if<Knots>(&e.value))
      v["knots"] = {{"times", k->times}, {"values", k->values}};
    else
      v["value"] = std::get<double>(e.value);
    if (!e.trainable) v["trainable"] = false;
    out[name] = std::move(v);
  }
  return {{"parameters", out}};
}

inline ParameterSet parse_parameters(const std::string& text) {
  return parameters_from_json(detail::parse_json_text(text));
}

inline ModelSpec parse_model_spec(const std::string& text) {
  const auto j = detail::parse_json_text(text);
  if (!j.is_object()) throw ParseError("model spec must be an object");
  ModelSpec spec;
  nlohmann::json body = j.contains("parameters") ? j.at("parameters") : j;
  if (!j.contains("parameters") && body.is_object()) body.erase("schedule_bindings");
  spec.params = parameters_from_json(body);
  if (j.contains("schedule_bindings"))
    for (const auto& [k, v] : j.at("schedule_bindings").items()) spec.schedule_bindings[k] = v.get<std::string>();
  return spec;
}

// ---------------------------------------------------------------------------

// Where a rate gets its value: a fixed number, a fixed schedule, one entry
// of theta, or a piecewise-linear curve through consecutive theta entries.
struct RateSpec {
  enum class Source { Fixed, FixedSchedule, Theta, ThetaKnots };
  Source source = Source::Fixed;
  double fixed = 0.0;
  Schedule schedule;  // FixedSchedule: the signal; ThetaKnots: knot times (values unused)
  std::size_t offset = 0;

  double value(double week, std::span<const double> theta) const {
    switch (source) {
      case Source::Fixed: return fixed;
      case Source::FixedSchedule: return schedule.at(week);
      case Source::Theta: return theta[offset];
      case Source::ThetaKnots: {
        std::size_t idx[2];
        double w[2];
        const int n = knot_weights(week, idx, w);
        double v = 0.0;
        for (int i = 0; i < n; ++i) v += w[i] * theta[offset + idx[i]];
        return v;
      }
    }
    return 0.0;
  }

  // d value / d theta as at most two (theta index, weight) pairs.
  int partials(double week, std::size_t idx[2], double w[2]) const {
    switch (source) {
      case Source::Fixed:
      case Source::FixedSchedule: return 0;
      case Source::Theta:
        idx[0] = offset;
        w[0] = 1.0;
        return 1;
      case Source::ThetaKnots: {
        const int n = knot_weights(week, idx, w);
        for (int i = 0; i < n; ++i) idx[i] += offset;
        return n;
      }
    }
    return 0;
  }

  bool depends_on_theta() const { return source == Source::Theta || source == Source::ThetaKnots; }

 private:
  int knot_weights(double week, std::size_t idx[2], double w[2]) const {
    const auto& t = schedule.times;
    if (week <= t.front()) {
      idx[0] = 0;
      w[0] = 1.0;
      return 1;
    }
    if (week >= t.back()) {
      idx[0] = t.size() - 1;
      w[0] = 1.0;
      return 1;
    }
    const auto hi = static_cast<std::size_t>(std::upper_bound(t.begin(), t.end(), week) - t.begin());
    const double a = (week - t[hi - 1]) / (t[hi] - t[hi - 1]);
    idx[0] = hi - 1;
    w[0] = 1.0 - a;
    idx[1] = hi;
    w[1] = a;
    return 2;
  }
};

struct FlowTerm {
  enum class Kind { Linear, Infection, Scheduled };
  Kind kind = Kind::Linear;
  std::size_t transition = 0;
  std::size_t patch = 0;
  std::size_t source = 0;  // slot
  std::size_t target = 0;  // slot
  RateSpec rate;           // linear rate, infection beta, or schedule
  std::optional<RateSpec> escape;
  std::vector<std::pair<std::size_t, double>> pressure;  // (infectious slot, contact weight)
  bool incidence = false;
  bool death = false;
};

struct StateSlot {
  std::size_t patch = 0;
  std::string compartment;
  CompartmentKind kind;
};

// Optional additive term on the compartment derivatives (default none).
using ResidualFn = std::function<void(std::span<const double> x, double t_days, std::span<double> dx)>;

struct CompileOptions {
  bool allow_unverified = false;
  bool row_normalize_contacts = false;
  std::map<std::string, std::string> schedule_bindings;
  ResidualFn residual;
};

class CompiledModel {
 public:
  struct Data {
    FlowGraph graph;
    PatchStructure patches;
    ParameterSet params;
    std::string scenario_id;
    std::vector<StateSlot> layout;
    std::vector<FlowTerm> flows;
    std::size_t num_compartments = 0;
    bool verified = true;
    ResidualFn residual;
  };

  CompiledModel() = default;
  explicit CompiledModel(Data d) : d_(std::make_shared<const Data>(std::move(d))) {}

  const FlowGraph& graph() const { return d_->graph; }
  const PatchStructure& patches() const { return d_->patches; }
  const ParameterSet& parameters() const { return d_->params; }
  const std::string& scenario_id() const { return d_->scenario_id; }
  const std::vector<StateSlot>& layout() const { return d_->layout; }
  const std::vector<FlowTerm>& flows() const { return d_->flows; }
  bool verified() const { return d_->verified; }
  bool has_residual() const { return static_cast<bool>(d_->residual); }

  std::size_t num_compartments() const { return d_->num_compartments; }
  std::size_t num_patches() const { return d_->patches.size(); }
  std::size_t num_slots() const { return d_->layout.size(); }
  std::size_t extended_size() const { return num_slots() + 2 * num_patches(); }
  std::size_t dof() const { return d_->params.dof(); }
  std::size_t slot(std::size_t patch, std::size_t compartment) const {
    return patch * num_compartments() + compartment;
  }
  std::size_t infections_slot(std::size_t patch) const { return num_slots() + patch; }
  std::size_t deaths_slot(std::size_t patch) const { return num_slots() + num_patches() + patch; }

  std::vector<double> default_theta() const { return d_->params.flatten(); }

  // Value of one flow term at the given (extended or compartment) state.
  double flow_value(const FlowTerm& f, std::span<const double> x, double t_days,
                    std::span<const double> theta) const {
    const double week = t_days / 7.0;
    double v = f.rate.value(week, theta) * x[f.source];
    if (f.kind == FlowTerm::Kind::Infection) {
      if (f.escape) v *= f.escape->value(week, theta);
      double lambda = 0.0;
      for (const auto& [s, c] : f.pressure) lambda += c * x[s];
      v *= lambda;
    }
    return v;
  }

  // Derivative of the extended state. x and dx have extended_size() entries.
  void rhs(std::span<const double> x, double t_days, std::span<const double> theta, std::span<double> dx) const {
    std::fill(dx.begin(), dx.end(), 0.0);
    for (const auto& f : d_->flows) {
      const double v = flow_value(f, x, t_days, theta);
      dx[f.source] -= v;
      dx[f.target] += v;
      if (f.incidence) dx[infections_slot(f.patch)] += v;
      if (f.death) dx[deaths_slot(f.patch)] += v;
    }
    if (d_->residual) d_->residual(x.first(num_slots()), t_days, dx.first(num_slots()));
  }

  // (source id, target id) pairs whose compiled flow is nonzero at a strictly
  // positive probe state with every rate forced to one.
  std::set<std::pair<std::string, std::string>> structural_pairs() const {
    std::vector<double> probe(extended_size(), 0.0);
    for (std::size_t i = 0; i < num_slots(); ++i) probe[i] = 1.0 / static_cast<double>(num_compartments());
    std::set<std::pair<std::string, std::string>> out;
    for (const auto& f : d_->flows) {
      double v = probe[f.source];
      if (f.kind == FlowTerm::Kind::Infection) {
        double lambda = 0.0;
        for (const auto& [s, c] : f.pressure) lambda += c * probe[s];
        v *= lambda;
      }
      if (v != 0.0) out.emplace(d_->layout[f.source].compartment, d_->layout[f.target].compartment);
    }
    return out;
  }

 private:
  std::shared_ptr<const Data> d_;
};

namespace detail {

inline RateSpec resolve_rate(const std::string& name, const Scenario& scenario, const ParameterSet& params,
                             const std::map<std::string, std::size_t>& offsets) {
  RateSpec r;
  if (auto it = scenario.overrides.find(name); it != scenario.overrides.end()) {
    if (const auto* c = std::get_if<double>(&it->second)) {
      r.source = RateSpec::Source::Fixed;
      r.fixed = *c;
    } else {
      r.source = RateSpec::Source::FixedSchedule;
      r.schedule = std::get<Schedule>(it->second);
    }
    return r;
  }
  const auto& e = params.at(name);
  if (const auto* k = std::get_if<Knots>(&e.value)) {
    r.schedule.times = k->times;
    r.schedule.values = k->values;
    r.schedule.interpolation = Interpolation::PiecewiseLinear;
    if (e.trainable) {
      r.source = RateSpec::Source::ThetaKnots;
      r.offset = offsets.at(name);
    } else {
      r.source = RateSpec::Source::FixedSchedule;
    }
  } else if (e.trainable) {
    r.source = RateSpec::Source::Theta;
    r.offset = offsets.at(name);
  } else {
    r.source = RateSpec::Source::Fixed;
    r.fixed = std::get<double>(e.value);
  }
  return r;
}

}  // namespace detail

inline CompiledModel compile(const FlowGraph& graph, const Scenario& scenario, const PatchStructure& patches,
                             const ParameterSet& params, const CompileOptions& options = {}) {
  using Tag = CompartmentKind::Tag;
  bool verified = true;
  if (!options.allow_unverified) {
    const auto verdict = validate_structure(graph);
    if (!verdict.passed()) throw CompileError("graph not verified:\n" + verdict.render());
  } else {
    verified = validate_structure(graph).passed();
  }
  patches.check();

  for (const auto& name : graph.param_names())
    if (!params.contains(name)) throw CompileError("missing parameter '" + name + "' referenced by the graph");
  for (const auto& [name, _] : params.entries())
    if (!graph.param_names().count(name))
      throw CompileError("unknown parameter '" + name + "' (not referenced by any transition)");
  for (const auto& [name, _] : scenario.overrides)
    if (!params.contains(name))
      throw CompileError("scenario '" + scenario.id + "' overrides unknown parameter '" + name + "'");

  auto schedule_for = [&](const std::string& graph_name) -> const Schedule& {
    std::string name = graph_name;
    if (auto it = options.schedule_bindings.find(graph_name); it != options.schedule_bindings.end())
      name = it->second;
    auto it = scenario.schedules.find(name);
    if (it == scenario.schedules.end())
      throw CompileError("unresolved schedule '" + name + "' in scenario '" + scenario.id + "'");
    return it->second;
  };
  for (const auto& [from, _] : options.schedule_bindings)
    if (!graph.schedule_names().count(from))
      throw CompileError("schedule binding for unknown graph schedule '" + from + "'");

  std::map<std::string, std::size_t> offsets;
  {
    std::size_t off = 0;
    for (const auto& [name, e] : params.entries()) {
      offsets[name] = off;
      off += e.dof();
    }
  }

  CompiledModel::Data d;
  d.graph = graph;
  d.patches = patches;
  d.params = params;
  d.scenario_id = scenario.id;
  d.verified = verified;
  d.residual = options.residual;
  d.num_compartments = graph.compartments().size();
  const std::size_t K = d.num_compartments;
  const std::size_t P = patches.size();
  for (std::size_t p = 0; p < P; ++p)
    for (const auto& c : graph.compartments()) d.layout.push_back({p, c.id, c.kind});

  std::vector<std::vector<double>> contact(P, std::vector<double>(P));
  for (std::size_t p = 0; p < P; ++p) {
    double row = 0.0;
    for (std::size_t q = 0; q < P; ++q) row += contact[p][q] = patches.contact_at(p, q);
    if (options.row_normalize_contacts && row > 0.0)
      for (auto& c : contact[p]) c /= row;
  }

  const Tag incidence_tag = graph.has_kind(Tag::E) ? Tag::E : Tag::I;
  for (std::size_t ti = 0; ti < graph.transitions().size(); ++ti) {
    const auto& t = graph.transitions()[ti];
    const std::size_t src = *graph.index_of(t.source);
    const std::size_t tgt = *graph.index_of(t.target);
    const auto& tkind = graph.compartments()[tgt].kind;
    for (std::size_t p = 0; p < P; ++p) {
      FlowTerm f;
      f.transition = ti;
      f.patch = p;
      f.source = p * K + src;
      f.target = p * K + tgt;
      f.incidence = tkind.is(incidence_tag);
      f.death = tkind.is(Tag::D);
      if (const auto* l = std::get_if<LinearFlow>(&t.kind)) {
        f.kind = FlowTerm::Kind::Linear;
        f.rate = detail::resolve_rate(l->rate_param, scenario, params, offsets);
      } else if (const auto* inf = std::get_if<InfectionFlow>(&t.kind)) {
        f.kind = FlowTerm::Kind::Infection;
        f.rate = detail::resolve_rate(inf->beta_param, scenario, params, offsets);
        if (inf->escape_param) f.escape = detail::resolve_rate(*inf->escape_param, scenario, params, offsets);
        for (std::size_t q = 0; q < P; ++q) {
          if (contact[p][q] == 0.0) continue;
          for (const auto& s : inf->infectious_sources)
            f.pressure.emplace_back(q * K + *graph.index_of(s), contact[p][q]);
        }
      } else {
        const auto& s = std::get<ScheduledFlow>(t.kind);
        f.kind = FlowTerm::Kind::Scheduled;
        f.rate.source = RateSpec::Source::FixedSchedule;
        f.rate.schedule = schedule_for(s.schedule);
      }
      d.flows.push_back(std::move(f));
    }
  }
  return CompiledModel(std::move(d));
}

// A compiled model paired with a concrete parameter vector.
class BoundModel {
 public:
  BoundModel(CompiledModel model, std::vector<double> theta) : model_(std::move(model)), theta_(std::move(theta)) {
    if (theta_.size() != model_.dof())
      throw Error("parameter vector has length " + std::to_string(theta_.size()) + ", expected " +
                  std::to_string(model_.dof()));
  }

  const CompiledModel& model() const { return model_; }
  const std::vector<double>& theta() const { return theta_; }

  void rhs(std::span<const double> x, double t_days, std::span<double> dx) const { model_.rhs(x, t_days, theta_, dx); }

  // Named read-back, including fixed and overridden values.
  ParameterSet named() const { return model_.parameters().with_values(theta_); }

 private:
  CompiledModel model_;
  std::vector<double> theta_;
};

inline BoundModel bind_parameters(const CompiledModel& model, std::vector<double> theta) {
  return BoundModel(model, std::move(theta));
}

inline std::size_t flat_index(const ParameterSet& params, const std::string& name,
                              std::optional<std::size_t> knot = std::nullopt) {
  return params.flat_index(name, knot);
}

}  // namespace epiagent
