#pragma once

// Knowledge-augmented prompt bundles handed to the planner.

#include <string>
#include <vector>

#include "epiagent/feedback.hpp"
#include "epiagent/flowgraph.hpp"
#include "epiagent/retrieval.hpp"
#include "epiagent/scenario.hpp"

namespace epiagent {

struct Passage {
  std::string doc_id;
  double score = 0.0;
  std::string excerpt;
};

inline std::vector<Passage> make_passages(const std::vector<RankedDocument>& ranking,
                                          const std::vector<CorpusDocument>& corpus,
                                          std::size_t max_excerpt = 400) {
  std::vector<Passage> out;
  for (const auto& r : ranking) {
    for (const auto& d : corpus)
      if (d.doc_id == r.doc_id) {
        out.push_back({r.doc_id, r.score, d.text.substr(0, max_excerpt)});
        break;
      }
  }
  return out;
}

inline std::string constraint_digest() {
  std::string out = "Flow validity (hard constraints):\n";
  for (const auto& r : flow_rules()) out += "  " + r.rule_id + ": " + r.message + "\n";
  out +=
      "  RA: infection originates at S, V or W and is driven by I, H or J compartments\n"
      "  RB: a graph with an infectious compartment has at least one infection transition\n"
      "  RC: the graph is weakly connected\n"
      "Execution constraints:\n"
      "  - states are population fractions in [0,1]; explicit time steps; no NaNs or Infs\n"
      "  - outputs are cumulative infections and deaths per patch and week\n"
      "  - disease parameters are shared across scenarios unless overridden\n"
      "  - scenario-specific variables are non-trainable\n"
      "  - no forced non-negativity of parameters\n";
  return out;
}

inline std::string skeleton_digest() {
  return
      "Flow graph document:\n"
      "  {\"compartments\": [{\"id\", \"kind\": S|E|I|R|D|V|W|H|J|custom:<label>, \"description\"}],\n"
      "   \"transitions\": [{\"source\", \"target\", \"kind\": linear|infection|scheduled,\n"
      "                     \"params\": {\"rate\"} | {\"beta\", \"sources\", \"escape\"?} | {\"schedule\"}}],\n"
      "   \"params\": [names]}\n"
      "Model spec document:\n"
      "  {\"parameters\": {name: {\"value\": x, \"trainable\": bool?}\n"
      "                 | {\"knots\": {\"times\": [weeks], \"values\": [x]}}},\n"
      "   \"schedule_bindings\": {graph_schedule: scenario_schedule}?}\n";
}

struct PromptBundle {
  std::string scenario_text;
  std::vector<Passage> retrieved_passages;
  std::string constraint_digest;
  std::string skeleton_digest;
  std::vector<std::string> feedback;  // appended, in order

  std::string render() const {
    std::string out = "## Scenario\n" + scenario_text + "\n\n## Retrieved knowledge\n";
    for (const auto& p : retrieved_passages) {
      char buf[64];
      std::snprintf(buf, sizeof buf, " (score %.4f)", p.score);
      out += "- [" + p.doc_id + "]" + buf + " " + p.excerpt + "\n";
    }
    out += "\n## Constraints\n" + constraint_digest + "\n## Skeleton\n" + skeleton_digest;
    for (const auto& f : feedback) out += "\n## Feedback\n" + f;
    return out;
  }
};

inline PromptBundle build_prompt(const std::string& scenario_text, std::vector<Passage> passages,
                                 const std::optional<FeedbackMessage>& feedback = std::nullopt) {
  std::stable_sort(passages.begin(), passages.end(),
                   [](const Passage& a, const Passage& b) { return a.score > b.score; });
  PromptBundle b{scenario_text, std::move(passages), constraint_digest(), skeleton_digest(), {}};
  if (feedback && !feedback->empty()) b.feedback.push_back(feedback->render());
  return b;
}

inline PromptBundle build_prompt(const Scenario& scenario, std::vector<Passage> passages,
                                 const std::optional<FeedbackMessage>& feedback = std::nullopt) {
  return build_prompt("[" + scenario.id + "] " + scenario.description, std::move(passages), feedback);
}

// The only way feedback enters a bundle: appended after everything else.
inline PromptBundle append_feedback(PromptBundle bundle, const FeedbackMessage& feedback) {
  bundle.feedback.push_back(feedback.render());
  return bundle;
}

inline PromptBundle append_text(PromptBundle bundle, std::string text) {
  bundle.feedback.push_back(std::move(text));
  return bundle;
}

// Structured feedback for a failed structural verdict; rule text is quoted verbatim.
inline FeedbackMessage graph_feedback(const GraphVerdict& verdict) {
  FeedbackMessage m;
  m.source = FeedbackMessage::Source::Verification;
  for (const auto& v : verdict.violations) {
    FeedbackItem item;
    item.finding = "[" + v.rule_id + "] " + (v.transition ? edge_label(*v.transition) + ": " : "") + v.message;
    if (v.transition)
      item.suggestion = "remove or reroute transition " + edge_label(*v.transition);
    else if (v.rule_id == "RB")
      item.suggestion = "add an infection transition driven by the infectious compartments";
    else if (v.rule_id == "RC")
      item.suggestion = "connect every compartment to the rest of the graph";
    m.items.push_back(std::move(item));
  }
  return m;
}

}  // namespace epiagent
