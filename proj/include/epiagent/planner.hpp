#pragma once

// Planner interface and the scripted planner used for offline runs.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "epiagent/error.hpp"
#include "epiagent/prompt.hpp"

namespace epiagent {

enum class Phase { GraphSynthesis, ModelSpec };

inline std::string phase_name(Phase p) { return p == Phase::GraphSynthesis ? "graph" : "model_spec"; }

struct PlannerRequest {
  Phase phase = Phase::GraphSynthesis;
  PromptBundle prompt;
  double temperature = 0.0;
  std::size_t attempt = 1;
};

// 64-bit FNV-1a of the text, as 16 hex digits.
inline std::string fingerprint(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Pulls the JSON document out of free text: a ```json fence if present,
// otherwise the span from the first '{' to the last '}'.
inline std::string extract_document(const std::string& text) {
  std::string body = text;
  if (auto fence = body.find("```"); fence != std::string::npos) {
    auto start = body.find('\n', fence);
    auto end = start == std::string::npos ? std::string::npos : body.find("```", start);
    if (end != std::string::npos) body = body.substr(start + 1, end - start - 1);
  }
  auto first = body.find('{');
  auto last = body.rfind('}');
  if (first == std::string::npos || last == std::string::npos || last < first) return body;
  return body.substr(first, last - first + 1);
}

struct PlannerResponse {
  std::string payload;  // the flow-graph or model-spec document
  std::string raw_text;
  std::string fingerprint;

  static PlannerResponse from_text(std::string raw) {
    PlannerResponse r;
    r.payload = extract_document(raw);
    r.fingerprint = epiagent::fingerprint(raw);
    r.raw_text = std::move(raw);
    return r;
  }
};

// Transport failures throw PlannerError; unparseable payloads are returned
// as-is and handled by the loop as feedback.
class Planner {
 public:
  virtual ~Planner() = default;
  virtual PlannerResponse propose(const PlannerRequest& request) = 0;
};

// Replays fixed responses per phase; the last response of a phase repeats
// once the script is exhausted. Records every request it receives.
class ScriptedPlanner : public Planner {
 public:
  ScriptedPlanner(std::vector<std::string> graph_responses, std::vector<std::string> spec_responses)
      : graph_(std::move(graph_responses)), spec_(std::move(spec_responses)) {}

  // {"graph": [doc | "text", ...], "model_spec": [doc | "text", ...]}
  static ScriptedPlanner from_json(const nlohmann::json& j) {
    auto list = [&](const char* key) {
      std::vector<std::string> out;
      if (j.contains(key))
        for (const auto& item : j.at(key)) out.push_back(item.is_string() ? item.get<std::string>() : item.dump(2));
      return out;
    };
    return ScriptedPlanner(list("graph"), list("model_spec"));
  }

  static ScriptedPlanner from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw PlannerError("cannot open planner script '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(detail::parse_json_text(ss.str()));
  }

  PlannerResponse propose(const PlannerRequest& request) override {
    requests_.push_back(request);
    auto& script = request.phase == Phase::GraphSynthesis ? graph_ : spec_;
    auto& cursor = request.phase == Phase::GraphSynthesis ? graph_pos_ : spec_pos_;
    if (script.empty()) throw PlannerError("scripted planner has no " + phase_name(request.phase) + " responses");
    const auto& text = script[std::min(cursor, script.size() - 1)];
    ++cursor;
    return PlannerResponse::from_text(text);
  }

  const std::vector<PlannerRequest>& requests() const { return requests_; }

 private:
  std::vector<std::string> graph_;
  std::vector<std::string> spec_;
  std::size_t graph_pos_ = 0;
  std::size_t spec_pos_ = 0;
  std::vector<PlannerRequest> requests_;
};

}  // namespace epiagent
