#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "reportpilot/completion.hpp"
#include "reportpilot/error.hpp"
#include "reportpilot/radiomics.hpp"
#include "reportpilot/rng.hpp"

namespace reportpilot::corpus {

struct Section {
  std::string heading;  // empty for the untitled section
  std::string body;
};

struct ReportDocument {
  std::string report_id;
  std::string raw_text;
  std::vector<Section> sections;
  std::map<std::string, std::vector<std::string>> organ_sentences;
};

// Headings are ALL-CAPS words followed by ':'. A heading alone on its line,
// or an inline heading that does not name an organ, opens a section; an
// inline organ heading ("KIDNEYS: ...") stays in the current section and
// attributes its sentences to that organ when they name no organ
// themselves. Organ attribution runs over FINDINGS and untitled sections.
ReportDocument parse_report_sections(std::string_view raw, std::string report_id = {});

// Normalized text form: "HEADING:\n" + body per section, joined by '\n'.
std::string render_sections(const ReportDocument& doc);

// Splits on '.', '!' or '?' followed by whitespace, and on line breaks,
// except after guarded abbreviations such as "cm." or "No.".
std::vector<std::string> split_sentences(std::string_view text);

// Throws UnknownOrgan, OrganNotMentioned. With `assist`, the backend is asked
// to extract the section from the raw report and its reply is used verbatim.
std::string extract_organ_section(const ReportDocument& doc, std::string_view organ,
                                  completion::Backend* assist = nullptr);

std::string assist_extraction_prompt(std::string_view organ, std::string_view raw_report);

enum class Condition { WithRadiomics, PrefixOnly };
enum class CaseLabel { Normal, Abnormal, Unknown };

std::string_view condition_name(Condition c);
Condition parse_condition(std::string_view s);
std::string_view label_name(CaseLabel l);
CaseLabel parse_label(std::string_view s);

struct TripletMeta {
  std::string report_id;
  std::string organ;
  Condition condition = Condition::WithRadiomics;
  CaseLabel label = CaseLabel::Unknown;
};

struct TrainingTriplet {
  std::string instruct;
  std::string input;
  std::string target;
  TripletMeta meta;
};

inline constexpr int kPrefixTokens = 20;

std::string instruction_for(std::string_view organ, Condition condition);

// First min(n, count) whitespace tokens joined by single spaces.
std::string prefix_tokens(std::string_view text, int n);

// Throws EmptyTarget, plus promptgen errors for the radiomics input.
TrainingTriplet build_triplet(std::span<const radiomics::OrganFeatureSet> features,
                              const std::optional<radiomics::LateralityRatio>& ratio,
                              std::string_view organ_text, std::string_view organ,
                              TripletMeta meta);
TrainingTriplet build_prefix_triplet(std::string_view organ_text, std::string_view organ,
                                     TripletMeta meta, int n = kPrefixTokens);

// Seeded sentence shuffle of the target; never the identity when at least
// two distinct sentences exist.
TrainingTriplet augment_reorder(const TrainingTriplet& triplet, std::uint64_t seed);

struct SplitSpec {
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
};

// Seeded shuffle, then the first floor(train_fraction * N) items train.
// Throws TooFewItems, InvalidArgument.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split(std::vector<T> items, const SplitSpec& spec) {
  if (items.size() < 2) throw Error(Errc::TooFewItems, "need at least 2 items");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
    throw Error(Errc::InvalidArgument, "train_fraction must be in (0, 1)");
  SeededRng rng(spec.seed);
  rng.shuffle(items);
  const auto n_train = static_cast<std::size_t>(spec.train_fraction * static_cast<double>(items.size()));
  std::vector<T> test(std::make_move_iterator(items.begin() + static_cast<std::ptrdiff_t>(n_train)),
                      std::make_move_iterator(items.end()));
  items.resize(n_train);
  return {std::move(items), std::move(test)};
}

struct SyntheticParams {
  double abnormal_fraction = 0.3;
  double normal_min_cm3 = 130.0, normal_max_cm3 = 190.0;
  double normal_ratio_min = 0.9, normal_ratio_max = 1.11;
  double low_min_cm3 = 40.0, low_max_cm3 = 110.0;
  double high_min_cm3 = 210.0, high_max_cm3 = 320.0;
};

struct SyntheticCase {
  std::string case_id;
  radiomics::OrganFeatureSet left;
  radiomics::OrganFeatureSet right;
  radiomics::LateralityRatio ratio;
  std::string report;
  CaseLabel label = CaseLabel::Unknown;
  std::vector<std::string> kidney_sentences;  // exactly what the report's kidney section holds
};

std::vector<SyntheticCase> generate_synthetic_corpus(int n_cases, std::uint64_t seed,
                                                     const SyntheticParams& params = {});

nlohmann::json synthetic_manifest(int n_cases, std::uint64_t seed, const SyntheticParams& params = {});

// Per-case feature file: {"case_id", "label", "organ", "features": [...], "ratio": {...}}.
nlohmann::json case_features_json(const SyntheticCase& c);

// Feature files: a bare array of feature sets, or an object with
// "features", optional "ratio" and optional "label".
struct FeatureFile {
  std::vector<radiomics::OrganFeatureSet> features;
  std::optional<radiomics::LateralityRatio> ratio;
  CaseLabel label = CaseLabel::Unknown;
};

// Throws ParseError.
FeatureFile parse_feature_file(const nlohmann::json& j);

// Feature sets belonging to `organ` (side variants included) and their
// ratio, computed from the pair when the file has none. Throws EmptyFeatures.
FeatureFile select_organ(const FeatureFile& file, std::string_view organ);

nlohmann::json to_json(const TrainingTriplet& t);
TrainingTriplet triplet_from_json(const nlohmann::json& j);

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const nlohmann::json> rows);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace reportpilot::corpus
