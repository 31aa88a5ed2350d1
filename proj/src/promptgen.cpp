#include "reportpilot/promptgen.hpp"

#include <algorithm>
#include <charconv>

#include "json.hpp"
#include "reportpilot/error.hpp"
#include "reportpilot/text.hpp"

namespace reportpilot::promptgen {

using radiomics::LateralityRatio;
using radiomics::OrganFeatureSet;

namespace {

enum class Side { None, Left, Right };

struct ExtraInfo {
  const char* key;
  const char* name;
  const char* unit;
};

ExtraInfo info(ExtraFeature f) {
  switch (f) {
    case ExtraFeature::SurfaceArea: return {"surface_area", "surface area", "mm2"};
    case ExtraFeature::Sphericity: return {"sphericity", "sphericity", ""};
    case ExtraFeature::IntensityMean: return {"intensity_mean", "mean intensity", "HU"};
    case ExtraFeature::IntensityStd: return {"intensity_std", "intensity standard deviation", "HU"};
    case ExtraFeature::Entropy: return {"entropy", "intensity entropy", "bits"};
  }
  return {"", "", ""};
}

double extra_value(const OrganFeatureSet& f, ExtraFeature e) {
  switch (e) {
    case ExtraFeature::SurfaceArea: return f.surface_area_mm2;
    case ExtraFeature::Sphericity: return f.sphericity;
    case ExtraFeature::IntensityMean: return f.intensity_mean;
    case ExtraFeature::IntensityStd: return f.intensity_std;
    case ExtraFeature::Entropy: return f.intensity_entropy;
  }
  return 0.0;
}

std::string normalize_name(std::string_view name) {
  std::string n = text::to_lower(text::trim(name));
  std::replace(n.begin(), n.end(), '_', ' ');
  return n;
}

// Splits "kidney left", "left kidney", "kidney_left" into (base, side).
std::pair<std::string, Side> split_side(std::string_view raw) {
  const std::string n = normalize_name(raw);
  auto ends = [&](std::string_view suf) {
    return n.size() > suf.size() && n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (n.rfind("left ", 0) == 0) return {n.substr(5), Side::Left};
  if (n.rfind("right ", 0) == 0) return {n.substr(6), Side::Right};
  if (ends(" left")) return {n.substr(0, n.size() - 5), Side::Left};
  if (ends(" right")) return {n.substr(0, n.size() - 6), Side::Right};
  return {n, Side::None};
}

std::string capitalize(std::string s) {
  if (!s.empty() && s[0] >= 'a' && s[0] <= 'z') s[0] = static_cast<char>(s[0] - 'a' + 'A');
  return s;
}

std::string subject(const std::string& organ, Side side) {
  switch (side) {
    case Side::Left: return "Left " + organ;
    case Side::Right: return "Right " + organ;
    case Side::None: return capitalize(organ);
  }
  return organ;
}

std::string key_prefix(Side side) {
  return side == Side::Left ? "left_" : side == Side::Right ? "right_" : "";
}

std::string substitute(const std::string& tmpl, const std::vector<Statement>& statements) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] != '{') {
      out += tmpl[i++];
      continue;
    }
    const auto close = tmpl.find('}', i);
    if (close == std::string::npos) throw Error(Errc::InvalidConfig, "unterminated placeholder");
    const auto key = tmpl.substr(i + 1, close - i - 1);
    const auto it = std::find_if(statements.begin(), statements.end(),
                                 [&](const Statement& s) { return s.key == key; });
    if (it == statements.end()) throw Error(Errc::InvalidConfig, "unknown placeholder {" + key + "}");
    out += it->value;
    i = close + 1;
  }
  return out;
}

bool parse_number(std::string_view token, double& out) {
  const auto res = std::from_chars(token.data(), token.data() + token.size(), out);
  return res.ec == std::errc() && res.ptr == token.data() + token.size();
}

}  // namespace

std::string Statement::render() const {
  if (copula) return name + " is " + value;
  return unit.empty() ? name + ": " + value : name + ": " + value + " " + unit;
}

PromptTemplates PromptTemplates::from_json(std::string_view text) {
  PromptTemplates t;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& [organ, tmpl] : j.items()) t.set(organ, tmpl.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("prompt templates: ") + e.what());
  }
  return t;
}

void PromptTemplates::set(std::string organ, std::string tmpl) {
  templates_[normalize_name(organ)] = std::move(tmpl);
}

const std::string* PromptTemplates::find(std::string_view organ) const {
  const auto it = templates_.find(normalize_name(organ));
  return it == templates_.end() ? nullptr : &it->second;
}

std::string render_volume(double volume_cm3) {
  return text::format_fixed(volume_cm3, volume_cm3 < 10.0 ? 1 : 0);
}

std::string render_ratio(double ratio) { return text::format_fixed(ratio, 2); }

std::string infer_organ(std::span<const OrganFeatureSet> features) {
  if (features.empty()) throw Error(Errc::EmptyFeatures);
  const auto base = split_side(features.front().organ).first;
  for (const auto& f : features) {
    if (split_side(f.organ).first != base)
      throw Error(Errc::OrganMismatch, "'" + f.organ + "' is not a variant of '" + base + "'");
  }
  return base;
}

InformativePrompt render_prompt(std::span<const OrganFeatureSet> features,
                                const std::optional<LateralityRatio>& ratio,
                                std::string_view organ_name, std::string_view report_prefix,
                                const RenderOptions& options) {
  if (features.empty()) throw Error(Errc::EmptyFeatures);
  const std::string organ = normalize_name(organ_name);

  const OrganFeatureSet* by_side[3] = {nullptr, nullptr, nullptr};  // left, right, none
  for (const auto& f : features) {
    const auto [base, side] = split_side(f.organ);
    if (base != organ)
      throw Error(Errc::OrganMismatch, "'" + f.organ + "' does not belong to '" + organ + "'");
    const int slot = side == Side::Left ? 0 : side == Side::Right ? 1 : 2;
    if (by_side[slot]) throw Error(Errc::InvalidArgument, "duplicate feature set for " + f.organ);
    by_side[slot] = &f;
  }
  constexpr Side kSides[3] = {Side::Left, Side::Right, Side::None};

  InformativePrompt p;
  p.organ = organ;
  p.report_prefix = std::string(report_prefix);
  for (int s = 0; s < 3; ++s) {
    if (!by_side[s]) continue;
    p.statements.push_back({key_prefix(kSides[s]) + "volume", subject(organ, kSides[s]) + " volume",
                            render_volume(by_side[s]->volume_cm3), "cm3"});
  }
  if (ratio) p.statements.push_back({"ratio", "the volume ratio", render_ratio(ratio->ratio), "", true});
  for (ExtraFeature e : kCanonicalExtras) {
    if (std::find(options.extras.begin(), options.extras.end(), e) == options.extras.end()) continue;
    const auto ei = info(e);
    for (int s = 0; s < 3; ++s) {
      if (!by_side[s]) continue;
      p.statements.push_back({key_prefix(kSides[s]) + ei.key, subject(organ, kSides[s]) + " " + ei.name,
                              text::format_fixed(extra_value(*by_side[s], e), 1), ei.unit});
    }
  }

  const std::string* tmpl = options.templates ? options.templates->find(organ) : nullptr;
  if (tmpl) {
    p.rendered = substitute(*tmpl, p.statements);
  } else {
    std::vector<std::string> parts;
    for (const auto& st : p.statements) parts.push_back(st.render());
    p.rendered = text::join(parts, ", ");
  }
  if (!report_prefix.empty()) p.rendered += ", " + p.report_prefix;
  return p;
}

std::string render_input_payload(std::span<const OrganFeatureSet> features,
                                 const std::optional<LateralityRatio>& ratio, std::string_view organ,
                                 const RenderOptions& options) {
  return render_prompt(features, ratio, organ, "", options).rendered;
}

std::string render_classifier_payload(const router::ClassifierEvidence& evidence) {
  std::vector<std::string> parts;
  for (const auto& [label, prob] : evidence.labels) {
    parts.push_back(capitalize(normalize_name(label)) + " probability: " + text::format_fixed(prob, 2));
  }
  return text::join(parts, ", ");
}

ParsedPayload parse_payload(std::string_view prompt) {
  static constexpr std::pair<std::string_view, std::string_view> kSuffixes[] = {
      {" volume", "volume"},
      {" surface area", "surface_area"},
      {" sphericity", "sphericity"},
      {" mean intensity", "intensity_mean"},
      {" intensity standard deviation", "intensity_std"},
      {" intensity entropy", "entropy"},
  };
  static constexpr std::string_view kRatio = "the volume ratio is ";

  ParsedPayload out;
  std::size_t pos = 0;
  while (pos <= prompt.size()) {
    auto next = prompt.find(", ", pos);
    if (next == std::string_view::npos) next = prompt.size();
    const auto piece = text::trim(prompt.substr(pos, next - pos));
    pos = next + 2;

    double value = 0.0;
    if (text::starts_with_ci(piece, kRatio)) {
      if (!parse_number(piece.substr(kRatio.size()), value)) break;
      out.values["ratio"] = value;
      ++out.statement_count;
      continue;
    }
    const auto colon = piece.find(": ");
    if (colon == std::string_view::npos) break;
    const auto name = text::to_lower(piece.substr(0, colon));
    const auto rest = text::split_ws(piece.substr(colon + 2));
    if (rest.empty() || !parse_number(rest.front(), value)) break;

    bool matched = false;
    for (const auto& [suffix, key] : kSuffixes) {
      if (name.size() <= suffix.size() ||
          name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0)
        continue;
      const auto [base, side] = split_side(name.substr(0, name.size() - suffix.size()));
      if (out.organ.empty()) out.organ = base;
      out.values[key_prefix(side) + std::string(key)] = value;
      matched = true;
      break;
    }
    if (!matched) break;
    ++out.statement_count;
  }
  return out;
}

}  // namespace reportpilot::promptgen
