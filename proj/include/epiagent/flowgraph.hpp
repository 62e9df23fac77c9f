#pragma once

// Epidemiological flow-graph IR: compartments, typed transitions, the
// structural verifier and a structural diff.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "epiagent/error.hpp"

namespace epiagent {

class CompartmentKind {
 public:
  enum class Tag { S, E, I, R, D, V, W, H, J, Custom };

  CompartmentKind() = default;
  CompartmentKind(Tag tag) : tag_(tag) {}  // NOLINT(implicit)

  static CompartmentKind custom(std::string label) {
    if (label.empty()) throw ParseError("custom compartment kind needs a nonempty label");
    if (is_reserved_letter(label))
      throw ParseError("custom label '" + label + "' collides with a reserved kind");
    CompartmentKind k(Tag::Custom);
    k.label_ = std::move(label);
    return k;
  }

  // Accepts "S".."J" or "custom:<label>".
  static CompartmentKind parse(const std::string& text) {
    static const std::map<std::string, Tag> reserved = {
        {"S", Tag::S}, {"E", Tag::E}, {"I", Tag::I}, {"R", Tag::R}, {"D", Tag::D},
        {"V", Tag::V}, {"W", Tag::W}, {"H", Tag::H}, {"J", Tag::J}};
    if (auto it = reserved.find(text); it != reserved.end()) return it->second;
    const std::string prefix = "custom:";
    if (text.rfind(prefix, 0) == 0) return custom(text.substr(prefix.size()));
    throw ParseError("unknown compartment kind '" + text + "'");
  }

  Tag tag() const { return tag_; }
  const std::string& label() const { return label_; }
  bool is_custom() const { return tag_ == Tag::Custom; }
  bool is(Tag t) const { return tag_ == t; }

  std::string str() const {
    static const char* letters[] = {"S", "E", "I", "R", "D", "V", "W", "H", "J"};
    if (is_custom()) return "custom:" + label_;
    return letters[static_cast<int>(tag_)];
  }

  friend bool operator==(const CompartmentKind&, const CompartmentKind&) = default;

  static constexpr Tag reserved_tags[] = {Tag::S, Tag::E, Tag::I, Tag::R, Tag::D,
                                          Tag::V, Tag::W, Tag::H, Tag::J};

 private:
  static bool is_reserved_letter(const std::string& s) {
    return s.size() == 1 && std::string("SEIRDVWHJ").find(s[0]) != std::string::npos;
  }

  Tag tag_ = Tag::S;
  std::string label_;
};

struct Compartment {
  std::string id;
  CompartmentKind kind;
  std::string description;

  friend bool operator==(const Compartment&, const Compartment&) = default;
};

struct LinearFlow {
  std::string rate_param;
  friend bool operator==(const LinearFlow&, const LinearFlow&) = default;
};

struct InfectionFlow {
  std::string beta_param;
  std::set<std::string> infectious_sources;
  std::optional<std::string> escape_param;
  friend bool operator==(const InfectionFlow&, const InfectionFlow&) = default;
};

struct ScheduledFlow {
  std::string schedule;
  friend bool operator==(const ScheduledFlow&, const ScheduledFlow&) = default;
};

using TransitionKind = std::variant<LinearFlow, InfectionFlow, ScheduledFlow>;

struct Transition {
  std::string source;
  std::string target;
  TransitionKind kind;

  friend bool operator==(const Transition&, const Transition&) = default;
};

inline std::string edge_label(const Transition& t) { return t.source + "->" + t.target; }

class FlowGraph {
 public:
  FlowGraph() = default;

  // Enforces the type invariants: unique ids, resolvable endpoints, no
  // self-loops or parallel edges. Parameter names are derived from the
  // transitions.
  FlowGraph(std::vector<Compartment> compartments, std::vector<Transition> transitions)
      : compartments_(std::move(compartments)), transitions_(std::move(transitions)) {
    std::set<std::string> ids;
    for (std::size_t i = 0; i < compartments_.size(); ++i) {
      const auto& c = compartments_[i];
      if (c.id.empty()) throw ParseError("compartments[" + std::to_string(i) + "].id: empty id");
      if (!ids.insert(c.id).second)
        throw ParseError("compartments[" + std::to_string(i) + "].id: duplicate compartment id '" +
                         c.id + "'");
    }
    std::set<std::pair<std::string, std::string>> pairs;
    for (std::size_t i = 0; i < transitions_.size(); ++i) {
      const auto& t = transitions_[i];
      const std::string where = "transitions[" + std::to_string(i) + "]";
      if (!ids.count(t.source))
        throw ParseError(where + ".source: unknown compartment '" + t.source + "'");
      if (!ids.count(t.target))
        throw ParseError(where + ".target: unknown compartment '" + t.target + "'");
      if (t.source == t.target) throw ParseError(where + ": self-loop on '" + t.source + "'");
      if (!pairs.emplace(t.source, t.target).second)
        throw ParseError(where + ": duplicate transition " + edge_label(t));
      if (const auto* inf = std::get_if<InfectionFlow>(&t.kind)) {
        for (const auto& src : inf->infectious_sources)
          if (!ids.count(src))
            throw ParseError(where + ".params.sources: unknown compartment '" + src + "'");
      }
      for (const auto& p : referenced_params(t))
        if (p.empty()) throw ParseError(where + ".params: empty parameter name");
      for (auto& p : referenced_params(t)) param_names_.insert(p);
    }
  }

  const std::vector<Compartment>& compartments() const { return compartments_; }
  const std::vector<Transition>& transitions() const { return transitions_; }
  const std::set<std::string>& param_names() const { return param_names_; }

  std::set<std::string> schedule_names() const {
    std::set<std::string> out;
    for (const auto& t : transitions_)
      if (const auto* s = std::get_if<ScheduledFlow>(&t.kind)) out.insert(s->schedule);
    return out;
  }

  const Compartment* find(const std::string& id) const {
    for (const auto& c : compartments_)
      if (c.id == id) return &c;
    return nullptr;
  }

  std::optional<std::size_t> index_of(const std::string& id) const {
    for (std::size_t i = 0; i < compartments_.size(); ++i)
      if (compartments_[i].id == id) return i;
    return std::nullopt;
  }

  const CompartmentKind& kind_of(const std::string& id) const {
    const auto* c = find(id);
    if (!c) throw Error("no compartment '" + id + "'");
    return c->kind;
  }

  bool has_kind(CompartmentKind::Tag tag) const {
    return std::any_of(compartments_.begin(), compartments_.end(),
                       [tag](const Compartment& c) { return c.kind.is(tag); });
  }

  static std::vector<std::string> referenced_params(const Transition& t) {
    std::vector<std::string> out;
    if (const auto* l = std::get_if<LinearFlow>(&t.kind)) out.push_back(l->rate_param);
    if (const auto* inf = std::get_if<InfectionFlow>(&t.kind)) {
      out.push_back(inf->beta_param);
      if (inf->escape_param) out.push_back(*inf->escape_param);
    }
    return out;
  }

  // Order-insensitive equality over compartments and transitions.
  friend bool equivalent(const FlowGraph& a, const FlowGraph& b) {
    auto cmp_c = [](const Compartment& x, const Compartment& y) { return x.id < y.id; };
    auto cmp_t = [](const Transition& x, const Transition& y) {
      return std::tie(x.source, x.target) < std::tie(y.source, y.target);
    };
    auto ca = a.compartments_, cb = b.compartments_;
    auto ta = a.transitions_, tb = b.transitions_;
    std::sort(ca.begin(), ca.end(), cmp_c);
    std::sort(cb.begin(), cb.end(), cmp_c);
    std::sort(ta.begin(), ta.end(), cmp_t);
    std::sort(tb.begin(), tb.end(), cmp_t);
    return ca == cb && ta == tb;
  }

 private:
  std::vector<Compartment> compartments_;
  std::vector<Transition> transitions_;
  std::set<std::string> param_names_;
};

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key,
                                     const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw ParseError(where + ": missing key '" + key + "'");
  return obj.at(key);
}

inline std::string require_string(const nlohmann::json& obj, const char* key,
                                  const std::string& where) {
  const auto& v = require(obj, key, where);
  if (!v.is_string()) throw ParseError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

inline nlohmann::json parse_json_text(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed document: ") + e.what());
  }
}

}  // namespace detail

inline FlowGraph graph_from_json(const nlohmann::json& doc) {
  using detail::require;
  using detail::require_string;
  if (!doc.is_object()) throw ParseError("graph document must be an object");
  const auto& comps = require(doc, "compartments", "graph");
  if (!comps.is_array()) throw ParseError("graph.compartments: expected a list");
  if (comps.empty()) throw ParseError("graph must declare at least one compartment");

  std::vector<Compartment> compartments;
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const std::string where = "compartments[" + std::to_string(i) + "]";
    Compartment c;
    c.id = require_string(comps[i], "id", where);
    try {
      c.kind = CompartmentKind::parse(require_string(comps[i], "kind", where));
    } catch (const ParseError& e) {
      throw ParseError(where + ".kind: " + e.what());
    }
    if (comps[i].contains("description")) c.description = comps[i].at("description").get<std::string>();
    compartments.push_back(std::move(c));
  }

  std::vector<Transition> transitions;
  if (doc.contains("transitions")) {
    const auto& trs = doc.at("transitions");
    if (!trs.is_array()) throw ParseError("graph.transitions: expected a list");
    for (std::size_t i = 0; i < trs.size(); ++i) {
      const std::string where = "transitions[" + std::to_string(i) + "]";
      Transition t;
      t.source = require_string(trs[i], "source", where);
      t.target = require_string(trs[i], "target", where);
      const std::string kind = require_string(trs[i], "kind", where);
      const nlohmann::json params = trs[i].value("params", nlohmann::json::object());
      const std::string pwhere = where + ".params";
      if (kind == "linear") {
        t.kind = LinearFlow{require_string(params, "rate", pwhere)};
      } else if (kind == "infection") {
        InfectionFlow inf;
        inf.beta_param = require_string(params, "beta", pwhere);
        const auto& srcs = require(params, "sources", pwhere);
        if (!srcs.is_array()) throw ParseError(pwhere + ".sources: expected a list");
        for (const auto& s : srcs) inf.infectious_sources.insert(s.get<std::string>());
        if (params.contains("escape") && !params.at("escape").is_null())
          inf.escape_param = params.at("escape").get<std::string>();
        t.kind = std::move(inf);
      } else if (kind == "scheduled") {
        t.kind = ScheduledFlow{require_string(params, "schedule", pwhere)};
      } else {
        throw ParseError(where + ".kind: unknown transition kind '" + kind + "'");
      }
      transitions.push_back(std::move(t));
    }
  }

  FlowGraph graph(std::move(compartments), std::move(transitions));

  if (doc.contains("params")) {
    std::set<std::string> declared;
    for (const auto& p : doc.at("params")) declared.insert(p.get<std::string>());
    for (const auto& p : graph.param_names())
      if (!declared.count(p)) throw ParseError("graph.params: referenced parameter '" + p + "' not declared");
    for (const auto& p : declared)
      if (!graph.param_names().count(p))
        throw ParseError("graph.params: declared parameter '" + p + "' is not referenced by any transition");
  }
  return graph;
}

inline FlowGraph parse_graph(const std::string& text) {
  return graph_from_json(detail::parse_json_text(text));
}

inline nlohmann::json to_json(const FlowGraph& g) {
  nlohmann::json doc;
  doc["compartments"] = nlohmann::json::array();
  for (const auto& c : g.compartments())
    doc["compartments"].push_back({{"id", c.id}, {"kind", c.kind.str()}, {"description", c.description}});
  doc["transitions"] = nlohmann::json::array();
  for (const auto& t : g.transitions()) {
    nlohmann::json jt{{"source", t.source}, {"target", t.target}};
    std::visit(
        [&](const auto& k) {
          using K = std::decay_t<decltype(k)>;
          if constexpr (std::is_same_v<K, LinearFlow>) {
            jt["kind"] = "linear";
            jt["params"] = {{"rate", k.rate_param}};
          } else if constexpr (std::is_same_v<K, InfectionFlow>) {
            jt["kind"] = "infection";
            jt["params"] = {{"beta", k.beta_param},
                            {"sources", std::vector<std::string>(k.infectious_sources.begin(),
                                                                 k.infectious_sources.end())}};
            if (k.escape_param) jt["params"]["escape"] = *k.escape_param;
          } else {
            jt["kind"] = "scheduled";
            jt["params"] = {{"schedule", k.schedule}};
          }
        },
        t.kind);
    doc["transitions"].push_back(std::move(jt));
  }
  doc["params"] = std::vector<std::string>(g.param_names().begin(), g.param_names().end());
  return doc;
}

inline std::string serialize_graph(const FlowGraph& g) { return to_json(g).dump(2); }

// ---------------------------------------------------------------------------
// Structural verification

struct FlowRule {
  std::string rule_id;
  bool (*forbidden)(CompartmentKind::Tag source, CompartmentKind::Tag target);
  std::string message;
};

namespace detail {
using Tag = CompartmentKind::Tag;
inline bool in(Tag t, std::initializer_list<Tag> set) {
  return std::find(set.begin(), set.end(), t) != set.end();
}
}  // namespace detail

// The seven forbidden-flow rules. Custom kinds are exempt.
inline const std::vector<FlowRule>& flow_rules() {
  using detail::in;
  using T = CompartmentKind::Tag;
  static const std::vector<FlowRule> rules = {
      {"R1", [](T s, T t) { return s == T::S && t == T::R; }, "S -> R is forbidden (no direct recovery)"},
      {"R2", [](T s, T t) { return s == T::S && t == T::I; }, "S -> I is forbidden (latent period required)"},
      {"R3", [](T s, T t) { return in(s, {T::S, T::E, T::R, T::V, T::W}) && t == T::D; },
       "{S,E,R,V,W} -> D is forbidden (death only from severe states)"},
      {"R4", [](T s, T) { return s == T::D; }, "D -> * is forbidden (terminal state)"},
      {"R5", [](T s, T t) { return in(s, {T::E, T::I, T::J, T::H}) && t == T::V; },
       "{E,I,J,H} -> V is forbidden (vaccination eligibility)"},
      {"R6", [](T s, T t) { return in(s, {T::S, T::E, T::I, T::J, T::H}) && t == T::W; },
       "{S,E,I,J,H} -> W is forbidden (waning semantics)"},
      {"R7", [](T s, T t) { return in(s, {T::E, T::I, T::R, T::J, T::H}) && t == T::E; },
       "{E,I,R,J,H} -> E is forbidden (exposure semantics)"},
  };
  return rules;
}

inline const FlowRule* find_rule(const std::string& id) {
  for (const auto& r : flow_rules())
    if (r.rule_id == id) return &r;
  return nullptr;
}

struct Violation {
  std::string rule_id;
  std::optional<Transition> transition;  // absent for graph-level rules (RB, RC)
  std::string message;
};

struct GraphVerdict {
  enum class Status { Pass, Fail };
  Status status = Status::Pass;
  std::vector<Violation> violations;

  bool passed() const { return status == Status::Pass; }

  std::set<std::string> rule_ids() const {
    std::set<std::string> out;
    for (const auto& v : violations) out.insert(v.rule_id);
    return out;
  }

  std::string render() const {
    std::string out = passed() ? "PASS\n" : "FAIL\n";
    for (const auto& v : violations) {
      out += "  [" + v.rule_id + "] ";
      if (v.transition) out += edge_label(*v.transition) + ": ";
      out += v.message + "\n";
    }
    return out;
  }
};

// Accumulates every violation; never stops at the first.
inline GraphVerdict validate_structure(const FlowGraph& graph) {
  using T = CompartmentKind::Tag;
  GraphVerdict verdict;
  auto add = [&](std::string id, std::optional<Transition> t, std::string msg) {
    verdict.violations.push_back({std::move(id), std::move(t), std::move(msg)});
  };

  bool any_infection = false;
  for (const auto& t : graph.transitions()) {
    const auto& sk = graph.kind_of(t.source);
    const auto& tk = graph.kind_of(t.target);
    if (!sk.is_custom() && !tk.is_custom()) {
      for (const auto& rule : flow_rules())
        if (rule.forbidden(sk.tag(), tk.tag())) add(rule.rule_id, t, rule.message);
    }
    if (const auto* inf = std::get_if<InfectionFlow>(&t.kind)) {
      any_infection = true;
      if (!detail::in(sk.tag(), {T::S, T::V, T::W}))
        add("RA", t, "infection must originate at a compartment of kind S, V or W (got " + sk.str() + ")");
      if (inf->infectious_sources.empty()) add("RA", t, "infection has no infectious sources");
      for (const auto& src : inf->infectious_sources) {
        const auto& k = graph.kind_of(src);
        if (!detail::in(k.tag(), {T::I, T::H, T::J}))
          add("RA", t, "infectious source '" + src + "' must be of kind I, H or J (got " + k.str() + ")");
      }
    }
  }

  if (graph.has_kind(T::I) && !any_infection)
    add("RB", std::nullopt, "graph has an infectious compartment but no infection transition");

  // Weak connectivity via union-find over compartment indices.
  const auto n = graph.compartments().size();
  if (n > 1) {
    std::vector<std::size_t> parent(n);
    for (std::size_t i = 0; i < n; ++i) parent[i] = i;
    auto root = [&](std::size_t i) {
      while (parent[i] != i) i = parent[i] = parent[parent[i]];
      return i;
    };
    auto join = [&](std::size_t a, std::size_t b) { parent[root(a)] = root(b); };
    for (const auto& t : graph.transitions()) {
      join(*graph.index_of(t.source), *graph.index_of(t.target));
      if (const auto* inf = std::get_if<InfectionFlow>(&t.kind))
        for (const auto& src : inf->infectious_sources) join(*graph.index_of(t.source), *graph.index_of(src));
    }
    std::vector<std::string> isolated;
    const auto r0 = root(0);
    for (std::size_t i = 1; i < n; ++i)
      if (root(i) != r0) isolated.push_back(graph.compartments()[i].id);
    if (!isolated.empty()) {
      std::string ids;
      for (const auto& id : isolated) ids += (ids.empty() ? "" : ", ") + id;
      add("RC", std::nullopt, "graph is not weakly connected; disconnected from '" +
                                  graph.compartments()[0].id + "': " + ids);
    }
  }

  verdict.status = verdict.violations.empty() ? GraphVerdict::Status::Pass : GraphVerdict::Status::Fail;
  return verdict;
}

// ---------------------------------------------------------------------------
// Structural diff

struct GraphDelta {
  std::vector<Compartment> added_compartments;
  std::vector<Compartment> removed_compartments;
  std::vector<Transition> added_transitions;
  std::vector<Transition> removed_transitions;

  bool empty() const {
    return added_compartments.empty() && removed_compartments.empty() && added_transitions.empty() &&
           removed_transitions.empty();
  }

  std::string render() const {
    std::string out;
    for (const auto& c : added_compartments) out += "+ compartment " + c.id + " (" + c.kind.str() + ")\n";
    for (const auto& c : removed_compartments) out += "- compartment " + c.id + " (" + c.kind.str() + ")\n";
    for (const auto& t : added_transitions) out += "+ transition " + edge_label(t) + "\n";
    for (const auto& t : removed_transitions) out += "- transition " + edge_label(t) + "\n";
    return out;
  }
};

// A compartment or transition whose content changed appears as removed + added.
inline GraphDelta graph_diff(const FlowGraph& old_graph, const FlowGraph& new_graph) {
  GraphDelta d;
  for (const auto& c : new_graph.compartments()) {
    const auto* o = old_graph.find(c.id);
    if (!o || !(*o == c)) d.added_compartments.push_back(c);
  }
  for (const auto& c : old_graph.compartments()) {
    const auto* n = new_graph.find(c.id);
    if (!n || !(*n == c)) d.removed_compartments.push_back(c);
  }
  auto find_t = [](const FlowGraph& g, const Transition& t) -> const Transition* {
    for (const auto& x : g.transitions())
      if (x.source == t.source && x.target == t.target) return &x;
    return nullptr;
  };
  for (const auto& t : new_graph.transitions()) {
    const auto* o = find_t(old_graph, t);
    if (!o || !(*o == t)) d.added_transitions.push_back(t);
  }
  for (const auto& t : old_graph.transitions()) {
    const auto* n = find_t(new_graph, t);
    if (!n || !(*n == t)) d.removed_transitions.push_back(t);
  }
  return d;
}

inline FlowGraph apply_delta(const FlowGraph& g, const GraphDelta& d) {
  std::vector<Compartment> comps;
  for (const auto& c : g.compartments()) {
    bool removed = std::any_of(d.removed_compartments.begin(), d.removed_compartments.end(),
                               [&](const Compartment& r) { return r.id == c.id; });
    if (!removed) comps.push_back(c);
  }
  comps.insert(comps.end(), d.added_compartments.begin(), d.added_compartments.end());
  std::vector<Transition> trs;
  for (const auto& t : g.transitions()) {
    bool removed = std::any_of(d.removed_transitions.begin(), d.removed_transitions.end(),
                               [&](const Transition& r) { return r.source == t.source && r.target == t.target; });
    if (!removed) trs.push_back(t);
  }
  trs.insert(trs.end(), d.added_transitions.begin(), d.added_transitions.end());
  return FlowGraph(std::move(comps), std::move(trs));
}

}  // namespace epiagent
