#pragma once

#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "reportpilot/imaging.hpp"

namespace reportpilot::router {

struct KeywordHit {
  std::string organ;  // canonical name
  std::size_t start = 0;
  std::size_t end = 0;  // one past the last character
  std::string surface_form;

  friend bool operator==(const KeywordHit&, const KeywordHit&) = default;
};

// Case-insensitive organ dictionary. Each canonical organ owns a set of
// surface forms; "left", "right" and "bilateral" qualified variants of every
// form fold to the same organ.
class OrganDictionary {
 public:
  OrganDictionary() = default;

  // Built-in dictionary covering the abdominal and thoracic organs that
  // appear in report text.
  static const OrganDictionary& standard();

  // JSON: {"organs": {"kidney": ["kidney", "kidneys"], ...}}
  static OrganDictionary from_json(std::string_view text);

  void add(std::string canonical, const std::vector<std::string>& forms);
  bool contains(std::string_view canonical) const;
  std::vector<std::string> organs() const;

  std::vector<KeywordHit> detect(std::string_view text) const;

 private:
  struct Form {
    std::string lowered;
    std::string organ;
  };
  std::vector<Form> forms_;  // sorted by descending length
  std::vector<std::string> organs_;
};

// Scan with the standard dictionary.
std::vector<KeywordHit> detect_keywords(std::string_view text);

struct StudyDescriptor {
  imaging::Modality modality = imaging::Modality::CT;
  std::string body_region;
  std::vector<std::string> hint_keywords;
};

struct RouteDecision {
  std::string pipeline_id;
  double score = 0.0;
  std::vector<std::string> matched_rules;
  std::vector<std::string> matched_keywords;
};

struct RouteRule {
  std::string id;
  std::string modality;  // "CT", "XR", "OTHER" or "*"
  std::string region;    // lowercase region or "*"
  std::vector<std::string> keywords;  // canonical organs; empty matches any study
  std::string pipeline_id;
  double weight = 1.0;
};

class RuleTable {
 public:
  // (CT, abdomen) -> ct-seg-radiomics; (XR, chest) -> xray-classifier.
  static RuleTable standard();

  // JSON: {"pipelines": [...], "rules": [{id, modality, region, keywords, pipeline, weight}]}
  static RuleTable from_json(std::string_view text);

  void add_pipeline(std::string id);
  void add_rule(RouteRule rule);
  const std::vector<RouteRule>& rules() const noexcept { return rules_; }

  // Throws NoPipelineMatches.
  RouteDecision route(const StudyDescriptor& study,
                      const OrganDictionary& dictionary = OrganDictionary::standard()) const;

 private:
  std::vector<std::string> pipelines_;
  std::vector<RouteRule> rules_;
};

RouteDecision route(const StudyDescriptor& study);

// Precomputed classifier output consumed by the x-ray pipeline.
struct ClassifierEvidence {
  std::vector<std::pair<std::string, double>> labels;  // descending probability
};

// JSON: {"labels": {"cardiomegaly": 0.82, ...}}. Throws ParseError.
ClassifierEvidence parse_classifier_evidence(std::string_view text);

StudyDescriptor parse_study_descriptor(std::string_view text);

}  // namespace reportpilot::router
