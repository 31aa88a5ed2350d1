#include "reportpilot/router.hpp"

#include <algorithm>
#include <cctype>

#include "json.hpp"
#include "reportpilot/error.hpp"
#include "reportpilot/text.hpp"

namespace reportpilot::router {

using json = nlohmann::json;

namespace {

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; }

bool matches_at(std::string_view text, std::size_t pos, std::string_view lowered) {
  if (pos + lowered.size() > text.size()) return false;
  if (!text::starts_with_ci(text.substr(pos), lowered)) return false;
  const std::size_t end = pos + lowered.size();
  return end == text.size() || !is_word_char(text[end]);
}

json parse_json(std::string_view text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string(what) + ": " + e.what());
  }
}

}  // namespace

const OrganDictionary& OrganDictionary::standard() {
  static const OrganDictionary dict = [] {
    OrganDictionary d;
    d.add("kidney", {"kidney", "kidneys"});
    d.add("liver", {"liver"});
    d.add("spleen", {"spleen"});
    d.add("bladder", {"bladder", "urinary bladder"});
    d.add("lung", {"lung", "lungs"});
    d.add("appendix", {"appendix"});
    d.add("adrenal gland", {"adrenal gland", "adrenal glands", "adrenal", "adrenals"});
    d.add("pancreas", {"pancreas"});
    d.add("aorta", {"aorta"});
    d.add("gallbladder", {"gallbladder", "gall bladder"});
    d.add("stomach", {"stomach"});
    d.add("ureter", {"ureter", "ureters"});
    d.add("prostate", {"prostate"});
    d.add("uterus", {"uterus"});
    d.add("colon", {"colon"});
    d.add("small bowel", {"small bowel", "small intestine"});
    d.add("duodenum", {"duodenum"});
    d.add("esophagus", {"esophagus"});
    d.add("heart", {"heart"});
    d.add("lymph node", {"lymph node", "lymph nodes"});
    return d;
  }();
  return dict;
}

OrganDictionary OrganDictionary::from_json(std::string_view text) {
  const auto j = parse_json(text, "organ dictionary");
  OrganDictionary d;
  try {
    for (const auto& [organ, forms] : j.at("organs").items()) {
      d.add(organ, forms.get<std::vector<std::string>>());
    }
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("organ dictionary: ") + e.what());
  }
  return d;
}

void OrganDictionary::add(std::string canonical, const std::vector<std::string>& forms) {
  canonical = text::to_lower(canonical);
  if (std::find(organs_.begin(), organs_.end(), canonical) == organs_.end())
    organs_.push_back(canonical);
  for (const auto& form : forms) {
    const auto lowered = text::to_lower(text::trim(form));
    if (lowered.empty()) continue;
    for (const char* qualifier : {"", "left ", "right ", "bilateral "}) {
      forms_.push_back({qualifier + lowered, canonical});
    }
  }
  std::stable_sort(forms_.begin(), forms_.end(), [](const Form& a, const Form& b) {
    return a.lowered.size() > b.lowered.size();
  });
}

bool OrganDictionary::contains(std::string_view canonical) const {
  return std::find(organs_.begin(), organs_.end(), text::to_lower(canonical)) != organs_.end();
}

std::vector<std::string> OrganDictionary::organs() const { return organs_; }

std::vector<KeywordHit> OrganDictionary::detect(std::string_view text) const {
  std::vector<KeywordHit> hits;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_char(text[i]) || (i > 0 && is_word_char(text[i - 1]))) {
      ++i;
      continue;
    }
    const Form* best = nullptr;
    for (const auto& f : forms_) {  // longest first
      if (matches_at(text, i, f.lowered)) {
        best = &f;
        break;
      }
    }
    if (best) {
      const std::size_t end = i + best->lowered.size();
      hits.push_back({best->organ, i, end, std::string(text.substr(i, end - i))});
      i = end;
    } else {
      ++i;
    }
  }
  return hits;
}

std::vector<KeywordHit> detect_keywords(std::string_view text) {
  return OrganDictionary::standard().detect(text);
}

RuleTable RuleTable::standard() {
  RuleTable t;
  t.add_pipeline("ct-seg-radiomics");
  t.add_pipeline("xray-classifier");
  t.add_rule({"ct-abdomen", "CT", "abdomen", {}, "ct-seg-radiomics", 1.0});
  t.add_rule({"xr-chest", "XR", "chest", {}, "xray-classifier", 1.0});
  return t;
}

RuleTable RuleTable::from_json(std::string_view text) {
  const auto j = parse_json(text, "rule table");
  RuleTable t;
  try {
    for (const auto& p : j.at("pipelines")) t.add_pipeline(p.get<std::string>());
    for (const auto& r : j.at("rules")) {
      RouteRule rule;
      rule.id = r.at("id").get<std::string>();
      rule.modality = r.value("modality", std::string("*"));
      rule.region = text::to_lower(r.value("region", std::string("*")));
      rule.keywords = r.value("keywords", std::vector<std::string>{});
      rule.pipeline_id = r.at("pipeline").get<std::string>();
      rule.weight = r.value("weight", 1.0);
      t.add_rule(std::move(rule));
    }
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, std::string("rule table: ") + e.what());
  }
  return t;
}

void RuleTable::add_pipeline(std::string id) { pipelines_.push_back(std::move(id)); }

void RuleTable::add_rule(RouteRule rule) {
  if (std::find(pipelines_.begin(), pipelines_.end(), rule.pipeline_id) == pipelines_.end())
    throw Error(Errc::InvalidConfig, "rule '" + rule.id + "' names unregistered pipeline '" +
                                         rule.pipeline_id + "'");
  if (!(rule.weight > 0)) throw Error(Errc::InvalidConfig, "rule '" + rule.id + "' weight must be > 0");
  if (rule.modality != "*") imaging::parse_modality(rule.modality);
  for (auto& k : rule.keywords) k = text::to_lower(k);
  rules_.push_back(std::move(rule));
}

RouteDecision RuleTable::route(const StudyDescriptor& study, const OrganDictionary& dictionary) const {
  std::vector<std::string> keywords;
  for (const auto& hit : dictionary.detect(text::join(study.hint_keywords, " ; "))) {
    if (std::find(keywords.begin(), keywords.end(), hit.organ) == keywords.end())
      keywords.push_back(hit.organ);
  }
  const auto modality = imaging::modality_name(study.modality);
  const auto region = text::to_lower(study.body_region);

  struct Tally {
    std::string pipeline;
    double score = 0.0;
    std::vector<std::string> rules;
  };
  std::vector<Tally> tallies;  // in order of first matching rule
  for (const auto& rule : rules_) {
    if (rule.modality != "*" && rule.modality != modality) continue;
    if (rule.region != "*" && rule.region != region) continue;
    if (!rule.keywords.empty() &&
        std::none_of(rule.keywords.begin(), rule.keywords.end(), [&](const std::string& k) {
          return std::find(keywords.begin(), keywords.end(), k) != keywords.end();
        }))
      continue;
    auto it = std::find_if(tallies.begin(), tallies.end(),
                           [&](const Tally& t) { return t.pipeline == rule.pipeline_id; });
    if (it == tallies.end()) it = tallies.insert(tallies.end(), Tally{rule.pipeline_id, 0.0, {}});
    it->score += rule.weight;
    it->rules.push_back(rule.id);
  }
  if (tallies.empty())
    throw Error(Errc::NoPipelineMatches, modality + "/" + (region.empty() ? "?" : region));

  const Tally* best = &tallies.front();
  for (const auto& t : tallies) {
    if (t.score > best->score) best = &t;
  }
  return {best->pipeline, best->score, best->rules, keywords};
}

RouteDecision route(const StudyDescriptor& study) {
  static const RuleTable table = RuleTable::standard();
  return table.route(study);
}

ClassifierEvidence parse_classifier_evidence(std::string_view text) {
  ClassifierEvidence ev;
  try {
    const auto j = json::parse(text);
    for (const auto& [name, p] : j.at("labels").items()) {
      const double prob = p.get<double>();
      if (!(prob >= 0.0 && prob <= 1.0))
        throw Error(Errc::ParseError, "probability for '" + name + "' outside [0, 1]");
      ev.labels.emplace_back(name, prob);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("classifier evidence: ") + e.what());
  }
  std::stable_sort(ev.labels.begin(), ev.labels.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return ev;
}

StudyDescriptor parse_study_descriptor(std::string_view text) {
  StudyDescriptor d;
  try {
    const auto j = json::parse(text);
    d.modality = imaging::parse_modality(j.at("modality").get<std::string>());
    d.body_region = text::to_lower(j.at("body_region").get<std::string>());
    d.hint_keywords = j.value("hint_keywords", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("study descriptor: ") + e.what());
  } catch (const Error& e) {
    throw Error(Errc::ParseError, std::string("study descriptor: ") + e.what());
  }
  if (d.body_region.empty()) throw Error(Errc::ParseError, "study descriptor: empty body_region");
  return d;
}

}  // namespace reportpilot::router
