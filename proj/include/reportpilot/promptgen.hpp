#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "reportpilot/radiomics.hpp"
#include "reportpilot/router.hpp"

namespace reportpilot::promptgen {

enum class ExtraFeature { SurfaceArea, Sphericity, IntensityMean, IntensityStd, Entropy };

// Canonical order in which extra features are rendered.
inline constexpr ExtraFeature kCanonicalExtras[] = {
    ExtraFeature::SurfaceArea, ExtraFeature::Sphericity, ExtraFeature::IntensityMean,
    ExtraFeature::IntensityStd, ExtraFeature::Entropy};

struct Statement {
  std::string key;    // placeholder name, e.g. "left_volume", "ratio"
  std::string name;   // e.g. "Left kidney volume"
  std::string value;  // rendered number
  std::string unit;   // may be empty
  bool copula = false;  // "name is value" instead of "name: value unit"

  std::string render() const;
};

struct InformativePrompt {
  std::string organ;
  std::vector<Statement> statements;
  std::string report_prefix;
  std::string rendered;
};

// Per-organ template overrides with named placeholders, e.g.
// {"kidney": "L={left_volume} R={right_volume} ratio {ratio}"}.
class PromptTemplates {
 public:
  static PromptTemplates from_json(std::string_view text);
  void set(std::string organ, std::string tmpl);
  const std::string* find(std::string_view organ) const;

 private:
  std::map<std::string, std::string, std::less<>> templates_;
};

struct RenderOptions {
  std::vector<ExtraFeature> extras;  // rendered in canonical order regardless of listing order
  const PromptTemplates* templates = nullptr;
};

// Throws OrganMismatch, EmptyFeatures, InvalidConfig (bad template placeholder).
InformativePrompt render_prompt(std::span<const radiomics::OrganFeatureSet> features,
                                const std::optional<radiomics::LateralityRatio>& ratio,
                                std::string_view organ, std::string_view report_prefix,
                                const RenderOptions& options = {});

std::string render_input_payload(std::span<const radiomics::OrganFeatureSet> features,
                                 const std::optional<radiomics::LateralityRatio>& ratio,
                                 std::string_view organ, const RenderOptions& options = {});

// Organ whose features are all given; the common base name, e.g. "kidney"
// for kidney_left + kidney_right. Throws EmptyFeatures or OrganMismatch.
std::string infer_organ(std::span<const radiomics::OrganFeatureSet> features);

// Statements for classifier evidence, e.g. "Cardiomegaly probability: 0.82".
std::string render_classifier_payload(const router::ClassifierEvidence& evidence);

std::string render_volume(double volume_cm3);
std::string render_ratio(double ratio);

// Inverse of the payload rendering: reads the leading feature statements
// of a prompt back into numbers keyed by placeholder name ("left_volume",
// "right_volume", "volume", "ratio", "left_surface_area", ...).
struct ParsedPayload {
  std::string organ;  // lowercase canonical subject, empty if none found
  std::map<std::string, double, std::less<>> values;
  std::size_t statement_count = 0;
};

ParsedPayload parse_payload(std::string_view prompt);

}  // namespace reportpilot::promptgen
