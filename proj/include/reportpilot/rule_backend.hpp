#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "reportpilot/completion.hpp"
#include "reportpilot/promptgen.hpp"

namespace reportpilot::completion {

// Boolean/arithmetic predicate over named feature values, e.g.
//   "ratio >= 0.85 and ratio <= 1.18 and not (min_volume < 120)"
// Supports numbers, identifiers, true/false, comparison operators
// (< <= > >= == !=), and/or/not (also && || !) and parentheses.
class Predicate {
 public:
  using Env = std::map<std::string, double, std::less<>>;

  // Throws InvalidConfig on syntax errors.
  static Predicate parse(std::string_view source);

  // Empty when the expression references a name missing from `env`.
  std::optional<bool> evaluate(const Env& env) const;
  const std::string& source() const noexcept { return source_; }

  struct Node;

 private:
  std::string source_;
  std::shared_ptr<const Node> root_;
};

struct ReportRule {
  std::string organ;  // canonical organ or "*"
  Predicate predicate;
  std::string template_text;  // "{organ}" expands to the organ name
  int priority = 0;           // lower fires first; ties keep file order
};

class RuleSet {
 public:
  // Kidney table: normal, left-small, right-small, atrophic, enlarged.
  static RuleSet standard();
  static std::string_view standard_json();

  // JSON: [{"organ", "predicate", "template", "priority"}, ...]
  static RuleSet from_json(std::string_view text);

  // Sentence for a prompt: the first matching rule for its organ, otherwise
  // the generic "The {organ} is visualized." sentence.
  std::string select(std::string_view prompt) const;
  // Empty when no rule matches.
  std::optional<std::string> match(const promptgen::ParsedPayload& payload) const;

  const std::vector<ReportRule>& rules() const noexcept { return rules_; }

  // Values visible to predicates: parsed payload keys plus min_volume and
  // max_volume over the available volumes.
  static Predicate::Env environment(const promptgen::ParsedPayload& payload);

 private:
  std::vector<ReportRule> rules_;
};

inline constexpr std::string_view kNoOrganSentence = "No focal abnormality is identified.";

// Deterministic template backend: evaluates the rule set against the
// feature statements in the prompt and streams the chosen sentence word by
// word. A sentence already present in the prompt yields no tokens.
class RuleBackend final : public Backend {
 public:
  explicit RuleBackend(RuleSet rules = RuleSet::standard(),
                       std::chrono::microseconds token_interval = std::chrono::microseconds{0});

  std::string name() const override { return "rule"; }
  void generate(std::string_view prompt, const BackendParams& params, const TokenSink& sink,
                std::stop_token stop) override;

  const RuleSet& rules() const noexcept { return rules_; }

 private:
  RuleSet rules_;
  std::chrono::microseconds interval_;
};

}  // namespace reportpilot::completion
