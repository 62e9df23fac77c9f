#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

namespace epiagent {

struct FeedbackItem {
  std::string finding;
  std::string suggestion;

  friend bool operator==(const FeedbackItem&, const FeedbackItem&) = default;
};

struct LossSummary {
  double final_loss = 0.0;
  bool stalled = false;
};

struct FeedbackMessage {
  enum class Source { Verification, Validation, Performance };

  Source source = Source::Verification;
  std::vector<FeedbackItem> items;
  std::optional<LossSummary> loss_summary;

  // A loss summary that is not stalled carries no finding on its own.
  bool empty() const { return items.empty() && !(loss_summary && loss_summary->stalled); }

  std::string render() const {
    static const char* names[] = {"verification", "validation", "performance"};
    std::string out = "Feedback (" + std::string(names[static_cast<int>(source)]) + "):\n";
    for (std::size_t i = 0; i < items.size(); ++i) {
      out += std::to_string(i + 1) + ". " + items[i].finding + "\n";
      if (!items[i].suggestion.empty()) out += "   revise: " + items[i].suggestion + "\n";
    }
    if (loss_summary) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "final loss %.6e%s\n", loss_summary->final_loss,
                    loss_summary->stalled ? " (stalled)" : "");
      out += buf;
    }
    return out;
  }
};

}  // namespace epiagent
