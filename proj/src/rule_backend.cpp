#include "reportpilot/rule_backend.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <condition_variable>
#include <mutex>
#include <variant>

#include "json.hpp"
#include "reportpilot/router.hpp"
#include "reportpilot/text.hpp"

namespace reportpilot::completion {

// ---------------------------------------------------------------------------
// Predicate

enum class Op { Or, And, Not, Lt, Le, Gt, Ge, Eq, Ne };

struct Predicate::Node {
  std::variant<double, std::string, Op> value;
  std::shared_ptr<const Node> lhs, rhs;
};

namespace {

using NodePtr = std::shared_ptr<const Predicate::Node>;

class Parser {
 public:
  explicit Parser(std::string_view src) : src_(src) {}

  NodePtr parse() {
    auto n = parse_or();
    skip_ws();
    if (pos_ != src_.size()) fail("unexpected trailing input");
    return n;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw Error(Errc::InvalidConfig, "predicate '" + std::string(src_) + "': " + what + " at " +
                                         std::to_string(pos_));
  }

  void skip_ws() {
    while (pos_ < src_.size() && text::is_space(src_[pos_])) ++pos_;
  }

  bool word(std::string_view w) {
    skip_ws();
    if (src_.substr(pos_, w.size()) != w) return false;
    const std::size_t end = pos_ + w.size();
    if (std::isalpha(static_cast<unsigned char>(w[0])) && end < src_.size() &&
        (std::isalnum(static_cast<unsigned char>(src_[end])) || src_[end] == '_'))
      return false;
    pos_ = end;
    return true;
  }

  static NodePtr binary(Op op, NodePtr a, NodePtr b) {
    return std::make_shared<const Predicate::Node>(Predicate::Node{op, std::move(a), std::move(b)});
  }

  NodePtr parse_or() {
    auto lhs = parse_and();
    while (word("or") || word("||")) lhs = binary(Op::Or, lhs, parse_and());
    return lhs;
  }

  NodePtr parse_and() {
    auto lhs = parse_unary();
    while (word("and") || word("&&")) lhs = binary(Op::And, lhs, parse_unary());
    return lhs;
  }

  NodePtr parse_unary() {
    skip_ws();
    if (word("not")) return binary(Op::Not, parse_unary(), nullptr);
    if (pos_ < src_.size() && src_[pos_] == '!' && (pos_ + 1 >= src_.size() || src_[pos_ + 1] != '=')) {
      ++pos_;
      return binary(Op::Not, parse_unary(), nullptr);
    }
    return parse_comparison();
  }

  NodePtr parse_comparison() {
    auto lhs = parse_primary();
    static constexpr std::pair<std::string_view, Op> kOps[] = {
        {"<=", Op::Le}, {">=", Op::Ge}, {"==", Op::Eq}, {"!=", Op::Ne}, {"<", Op::Lt}, {">", Op::Gt}};
    for (const auto& [tok, op] : kOps) {
      if (word(tok)) return binary(op, lhs, parse_primary());
    }
    return lhs;
  }

  NodePtr parse_primary() {
    skip_ws();
    if (pos_ >= src_.size()) fail("unexpected end of input");
    const char c = src_[pos_];
    if (c == '(') {
      ++pos_;
      auto n = parse_or();
      skip_ws();
      if (pos_ >= src_.size() || src_[pos_] != ')') fail("expected ')'");
      ++pos_;
      return n;
    }
    if (word("true")) return std::make_shared<const Predicate::Node>(Predicate::Node{1.0, {}, {}});
    if (word("false")) return std::make_shared<const Predicate::Node>(Predicate::Node{0.0, {}, {}});
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '.') {
      double v = 0;
      const auto res = std::from_chars(src_.data() + pos_, src_.data() + src_.size(), v);
      if (res.ec != std::errc()) fail("bad number");
      pos_ = static_cast<std::size_t>(res.ptr - src_.data());
      return std::make_shared<const Predicate::Node>(Predicate::Node{v, {}, {}});
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      const std::size_t start = pos_;
      while (pos_ < src_.size() &&
             (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
        ++pos_;
      return std::make_shared<const Predicate::Node>(
          Predicate::Node{std::string(src_.substr(start, pos_ - start)), {}, {}});
    }
    fail("unexpected character");
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

std::optional<double> eval(const Predicate::Node& n, const Predicate::Env& env) {
  if (const auto* v = std::get_if<double>(&n.value)) return *v;
  if (const auto* name = std::get_if<std::string>(&n.value)) {
    const auto it = env.find(*name);
    if (it == env.end()) return std::nullopt;
    return it->second;
  }
  const Op op = std::get<Op>(n.value);
  const auto a = eval(*n.lhs, env);
  if (!a) return std::nullopt;
  if (op == Op::Not) return *a == 0.0 ? 1.0 : 0.0;
  // Short-circuit keeps "has_x and x > 1" style guards usable.
  if (op == Op::And && *a == 0.0) return 0.0;
  if (op == Op::Or && *a != 0.0) return 1.0;
  const auto b = eval(*n.rhs, env);
  if (!b) return std::nullopt;
  switch (op) {
    case Op::And:
    case Op::Or: return *b != 0.0 ? 1.0 : 0.0;
    case Op::Lt: return *a < *b ? 1.0 : 0.0;
    case Op::Le: return *a <= *b ? 1.0 : 0.0;
    case Op::Gt: return *a > *b ? 1.0 : 0.0;
    case Op::Ge: return *a >= *b ? 1.0 : 0.0;
    case Op::Eq: return *a == *b ? 1.0 : 0.0;
    case Op::Ne: return *a != *b ? 1.0 : 0.0;
    case Op::Not: break;
  }
  return std::nullopt;
}

std::string expand(std::string_view tmpl, std::string_view organ) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl.substr(i, 7) == "{organ}") {
      out += organ;
      i += 7;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

}  // namespace

Predicate Predicate::parse(std::string_view source) {
  Predicate p;
  p.source_ = std::string(source);
  p.root_ = Parser(p.source_).parse();
  return p;
}

std::optional<bool> Predicate::evaluate(const Env& env) const {
  const auto v = eval(*root_, env);
  if (!v) return std::nullopt;
  return *v != 0.0;
}

// ---------------------------------------------------------------------------
// RuleSet

std::string_view RuleSet::standard_json() {
  static constexpr std::string_view kJson = R"json([
  {"organ": "kidney", "priority": 10,
   "predicate": "left_volume >= 120 and left_volume <= 200 and right_volume >= 120 and right_volume <= 200 and ratio >= 0.85 and ratio <= 1.18",
   "template": "The kidneys have a normal appearance."},
  {"organ": "kidney", "priority": 20,
   "predicate": "ratio < 0.85",
   "template": "The left kidney is small relative to the right, suggesting asymmetry."},
  {"organ": "kidney", "priority": 30,
   "predicate": "ratio > 1.18",
   "template": "The right kidney is small relative to the left, suggesting asymmetry."},
  {"organ": "kidney", "priority": 40,
   "predicate": "min_volume < 120",
   "template": "The kidneys appear atrophic, with reduced renal volume."},
  {"organ": "kidney", "priority": 50,
   "predicate": "max_volume > 200",
   "template": "The kidneys appear enlarged, with increased renal volume."}
]
)json";
  return kJson;
}

RuleSet RuleSet::standard() {
  static const RuleSet rules = from_json(standard_json());
  return rules;
}

RuleSet RuleSet::from_json(std::string_view text) {
  RuleSet set;
  try {
    const auto j = nlohmann::json::parse(text);
    if (!j.is_array()) throw Error(Errc::InvalidConfig, "rule file must be a JSON array");
    for (const auto& r : j) {
      set.rules_.push_back({text::to_lower(r.at("organ").get<std::string>()),
                            Predicate::parse(r.at("predicate").get<std::string>()),
                            r.at("template").get<std::string>(), r.value("priority", 0)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("rule file: ") + e.what());
  }
  std::stable_sort(set.rules_.begin(), set.rules_.end(),
                   [](const ReportRule& a, const ReportRule& b) { return a.priority < b.priority; });
  return set;
}

Predicate::Env RuleSet::environment(const promptgen::ParsedPayload& payload) {
  Predicate::Env env(payload.values.begin(), payload.values.end());
  std::optional<double> lo, hi;
  for (const char* key : {"left_volume", "right_volume", "volume"}) {
    const auto it = payload.values.find(key);
    if (it == payload.values.end()) continue;
    lo = lo ? std::min(*lo, it->second) : it->second;
    hi = hi ? std::max(*hi, it->second) : it->second;
  }
  if (lo) env["min_volume"] = *lo;
  if (hi) env["max_volume"] = *hi;
  return env;
}

std::optional<std::string> RuleSet::match(const promptgen::ParsedPayload& payload) const {
  if (payload.organ.empty()) return std::nullopt;
  const auto env = environment(payload);
  for (const auto& rule : rules_) {
    if (rule.organ != "*" && rule.organ != payload.organ) continue;
    if (rule.predicate.evaluate(env).value_or(false)) return expand(rule.template_text, payload.organ);
  }
  return std::nullopt;
}

std::string RuleSet::select(std::string_view prompt) const {
  const auto payload = promptgen::parse_payload(prompt);
  if (auto sentence = match(payload)) return *sentence;
  std::string organ = payload.organ;
  if (organ.empty()) {
    const auto hits = router::detect_keywords(prompt);
    if (hits.empty()) return std::string(kNoOrganSentence);
    organ = hits.front().organ;
  }
  return "The " + organ + " is visualized.";
}

// ---------------------------------------------------------------------------
// RuleBackend

RuleBackend::RuleBackend(RuleSet rules, std::chrono::microseconds token_interval)
    : rules_(std::move(rules)), interval_(token_interval) {}

void RuleBackend::generate(std::string_view prompt, const BackendParams& params, const TokenSink& sink,
                           std::stop_token stop) {
  if (text::trim(prompt).empty()) throw Error(Errc::EmptyPrompt);
  const std::string sentence = rules_.select(prompt);
  if (prompt.find(sentence) != std::string_view::npos) return;

  const auto tokens = word_tokens(sentence);
  std::mutex mu;
  std::condition_variable_any cv;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (stop.stop_requested() || static_cast<int>(i) >= params.max_tokens) return;
    if (i > 0 && interval_.count() > 0) {
      std::unique_lock lock(mu);
      if (cv.wait_for(lock, stop, interval_, [] { return false; })) return;
      if (stop.stop_requested()) return;
    }
    sink(tokens[i]);
  }
}

}  // namespace reportpilot::completion
