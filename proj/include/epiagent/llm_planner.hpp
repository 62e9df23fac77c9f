#pragma once

// Planner backed by an HTTP chat-completion endpoint. Optional: nothing
// else in the library depends on it.

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "epiagent/error.hpp"
#include "epiagent/planner.hpp"

namespace epiagent {

struct EndpointConfig {
  std::string url;  // http://host[:port]/path
  std::string api_key;
  std::string model;
  int attempts = 3;
  int backoff_ms = 250;  // doubled after each failed attempt
  int timeout_s = 60;

  static EndpointConfig from_env() {
    auto get = [](const char* name) {
      const char* v = std::getenv(name);
      return v ? std::string(v) : std::string();
    };
    EndpointConfig c;
    c.url = get("EPIAGENT_LLM_ENDPOINT");
    c.api_key = get("EPIAGENT_LLM_API_KEY");
    c.model = get("EPIAGENT_LLM_MODEL");
    return c;
  }
};

class LlmPlanner : public Planner {
 public:
  explicit LlmPlanner(EndpointConfig config) : config_(std::move(config)) {
    if (config_.url.empty())
      throw PlannerError(
          "no LLM endpoint configured: set EPIAGENT_LLM_ENDPOINT (and EPIAGENT_LLM_API_KEY, EPIAGENT_LLM_MODEL), "
          "or use a scripted planner (--planner scripted:<path>)");
    const std::string scheme = "http://";
    if (config_.url.rfind(scheme, 0) != 0) throw PlannerError("LLM endpoint must be an http:// URL: " + config_.url);
    const auto slash = config_.url.find('/', scheme.size());
    host_ = config_.url.substr(0, slash);
    path_ = slash == std::string::npos ? "/" : config_.url.substr(slash);
  }

  PlannerResponse propose(const PlannerRequest& request) override {
    nlohmann::json body = {
        {"temperature", request.temperature},
        {"messages",
         {{{"role", "system"},
           {"content", request.phase == Phase::GraphSynthesis
                           ? "Respond with a single flow-graph JSON document following the skeleton."
                           : "Respond with a single model-spec JSON document following the skeleton."}},
          {{"role", "user"}, {"content", request.prompt.render()}}}}};
    if (!config_.model.empty()) body["model"] = config_.model;

    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

    std::string last_error;
    int delay = config_.backoff_ms;
    for (int attempt = 0; attempt < config_.attempts; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        delay *= 2;
      }
      httplib::Client client(host_);
      client.set_read_timeout(config_.timeout_s, 0);
      client.set_connection_timeout(config_.timeout_s, 0);
      auto res = client.Post(path_, headers, body.dump(), "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw PlannerError("LLM endpoint returned HTTP " + std::to_string(res->status));
      return PlannerResponse::from_text(message_content(res->body));
    }
    throw PlannerError("LLM endpoint failed after " + std::to_string(config_.attempts) + " attempts: " + last_error);
  }

  // choices[0].message.content when present, else the raw body.
  static std::string message_content(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return body;
    if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty()) {
      const auto& c = j["choices"][0];
      if (c.contains("message") && c["message"].contains("content") && c["message"]["content"].is_string())
        return c["message"]["content"].get<std::string>();
    }
    if (j.contains("content") && j["content"].is_string()) return j["content"].get<std::string>();
    return body;
  }

 private:
  EndpointConfig config_;
  std::string host_;
  std::string path_;
};

inline std::unique_ptr<Planner> llm_planner(const EndpointConfig& config) {
  return std::make_unique<LlmPlanner>(config);
}

}  // namespace epiagent
