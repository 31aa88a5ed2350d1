#include "reportpilot/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "reportpilot/promptgen.hpp"
#include "reportpilot/router.hpp"
#include "reportpilot/rule_backend.hpp"
#include "reportpilot/text.hpp"

namespace reportpilot::corpus {

using json = nlohmann::json;
using radiomics::LateralityRatio;
using radiomics::OrganFeatureSet;

namespace {

constexpr std::string_view kAbbreviations[] = {"cm.", "mm.", "no.", "dr.", "e.g.", "i.e.", "vs.",
                                               "approx.", "fig.", "mr.", "ms.", "st."};

bool guarded(std::string_view text, std::size_t period) {
  std::size_t start = period;
  while (start > 0 && !text::is_space(text[start - 1])) --start;
  const auto word = text::to_lower(text.substr(start, period + 1 - start));
  return std::find(std::begin(kAbbreviations), std::end(kAbbreviations), word) != std::end(kAbbreviations);
}

// Heading label when the line starts with ALL-CAPS words and ':'.
std::optional<std::pair<std::string, std::string>> heading_of(std::string_view line) {
  const auto colon = line.find(':');
  if (colon == std::string_view::npos || colon == 0) return std::nullopt;
  const auto label = line.substr(0, colon);
  if (!(label[0] >= 'A' && label[0] <= 'Z')) return std::nullopt;
  for (char c : label) {
    if (!((c >= 'A' && c <= 'Z') || c == ' ' || c == '/' || c == '-' || c == '&')) return std::nullopt;
  }
  if (label.back() == ' ') return std::nullopt;
  return std::pair{std::string(label), std::string(text::trim(line.substr(colon + 1)))};
}

// Canonical organ when the whole label is one organ keyword ("KIDNEYS").
std::optional<std::string> organ_label(std::string_view label) {
  const auto hits = router::detect_keywords(label);
  if (hits.size() == 1 && hits[0].start == 0 && hits[0].end == label.size()) return hits[0].organ;
  return std::nullopt;
}

bool attributes_organs(const Section& s) { return s.heading.empty() || s.heading == "FINDINGS"; }

void attribute(ReportDocument& doc, const Section& section) {
  std::istringstream lines(section.body);
  std::string line;
  while (std::getline(lines, line)) {
    std::string_view content = text::trim(line);
    std::optional<std::string> label_organ;
    if (auto h = heading_of(content)) {
      if ((label_organ = organ_label(h->first))) content = text::trim(content.substr(content.find(':') + 1));
    }
    for (const auto& sentence : split_sentences(content)) {
      std::vector<std::string> organs;
      for (const auto& hit : router::detect_keywords(sentence)) {
        if (std::find(organs.begin(), organs.end(), hit.organ) == organs.end()) organs.push_back(hit.organ);
      }
      if (organs.empty() && label_organ) organs.push_back(*label_organ);
      for (const auto& o : organs) doc.organ_sentences[o].push_back(sentence);
    }
  }
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view body) {
  std::vector<std::string> out;
  auto flush = [&](std::string_view s) {
    const auto t = text::trim(s);
    if (!t.empty()) out.emplace_back(t);
  };
  std::size_t start = 0;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char c = body[i];
    if (c == '\n') {
      flush(body.substr(start, i - start));
      start = i + 1;
      continue;
    }
    if (c != '.' && c != '!' && c != '?') continue;
    const bool boundary = i + 1 == body.size() || text::is_space(body[i + 1]);
    if (!boundary || (c == '.' && guarded(body, i))) continue;
    flush(body.substr(start, i + 1 - start));
    start = i + 1;
  }
  flush(body.substr(start));
  return out;
}

ReportDocument parse_report_sections(std::string_view raw, std::string report_id) {
  ReportDocument doc;
  doc.report_id = std::move(report_id);
  doc.raw_text = std::string(raw);
  if (text::trim(raw).empty()) return doc;

  std::vector<std::pair<Section, std::vector<std::string>>> building;
  auto current = [&]() -> std::vector<std::string>& {
    if (building.empty()) building.push_back({Section{}, {}});
    return building.back().second;
  };

  std::istringstream in{std::string(raw)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto trimmed = text::trim(line);
    if (auto h = heading_of(trimmed)) {
      if (h->second.empty() || !organ_label(h->first)) {
        building.push_back({Section{h->first, {}}, {}});
        if (!h->second.empty()) building.back().second.push_back(h->second);
        continue;
      }
    }
    if (!trimmed.empty() || !building.empty()) current().emplace_back(trimmed);
  }

  for (auto& [section, lines] : building) {
    section.body = std::string(text::trim(text::join(lines, "\n")));
    doc.sections.push_back(std::move(section));
  }
  for (const auto& s : doc.sections) {
    if (attributes_organs(s)) attribute(doc, s);
  }
  return doc;
}

std::string render_sections(const ReportDocument& doc) {
  std::vector<std::string> parts;
  for (const auto& s : doc.sections) {
    parts.push_back(s.heading.empty() ? s.body : s.heading + ":\n" + s.body);
  }
  return text::join(parts, "\n");
}

std::string assist_extraction_prompt(std::string_view organ, std::string_view raw_report) {
  return "Extract the sentences of the following radiology report that describe the " +
         std::string(organ) + ". Reply with those sentences only, copied verbatim.\n\nReport:\n" +
         std::string(raw_report);
}

std::string extract_organ_section(const ReportDocument& doc, std::string_view organ,
                                  completion::Backend* assist) {
  const auto& dict = router::OrganDictionary::standard();
  if (!dict.contains(organ)) throw Error(Errc::UnknownOrgan, std::string(organ));
  const auto key = text::to_lower(organ);

  std::string result;
  if (assist) {
    completion::BackendParams params;
    params.max_tokens = 1024;
    const auto tokens = completion::generate_all(*assist, assist_extraction_prompt(key, doc.raw_text), params);
    for (const auto& t : tokens) result += t;
  } else if (const auto it = doc.organ_sentences.find(key); it != doc.organ_sentences.end()) {
    result = text::join(it->second, " ");
  }
  result = std::string(text::trim(result));
  if (result.empty()) throw Error(Errc::OrganNotMentioned, key);
  return result;
}

std::string_view condition_name(Condition c) {
  return c == Condition::WithRadiomics ? "WithRadiomics" : "PrefixOnly";
}

Condition parse_condition(std::string_view s) {
  if (s == "WithRadiomics" || s == "with") return Condition::WithRadiomics;
  if (s == "PrefixOnly" || s == "prefix") return Condition::PrefixOnly;
  throw Error(Errc::InvalidArgument, "unknown condition '" + std::string(s) + "'");
}

std::string_view label_name(CaseLabel l) {
  switch (l) {
    case CaseLabel::Normal: return "Normal";
    case CaseLabel::Abnormal: return "Abnormal";
    case CaseLabel::Unknown: return "Unknown";
  }
  return "Unknown";
}

CaseLabel parse_label(std::string_view s) {
  if (s == "Normal" || s == "normal") return CaseLabel::Normal;
  if (s == "Abnormal" || s == "abnormal") return CaseLabel::Abnormal;
  if (s == "Unknown" || s == "unknown" || s.empty()) return CaseLabel::Unknown;
  throw Error(Errc::InvalidArgument, "unknown label '" + std::string(s) + "'");
}

std::string instruction_for(std::string_view organ, Condition condition) {
  if (condition == Condition::WithRadiomics)
    return "Complete the radiology report section for the " + std::string(organ) +
           " given the quantitative findings.";
  return "Complete the radiology report section for the " + std::string(organ) +
         " given its opening words.";
}

std::string prefix_tokens(std::string_view text, int n) {
  if (n < 1) throw Error(Errc::InvalidArgument, "prefix length must be >= 1");
  auto tokens = text::split_ws(text);
  if (tokens.size() > static_cast<std::size_t>(n)) tokens.resize(static_cast<std::size_t>(n));
  return text::join(tokens, " ");
}

TrainingTriplet build_triplet(std::span<const OrganFeatureSet> features,
                              const std::optional<LateralityRatio>& ratio, std::string_view organ_text,
                              std::string_view organ, TripletMeta meta) {
  const auto target = text::trim(organ_text);
  if (target.empty()) throw Error(Errc::EmptyTarget);
  meta.organ = std::string(organ);
  meta.condition = Condition::WithRadiomics;
  return {instruction_for(organ, Condition::WithRadiomics),
          promptgen::render_input_payload(features, ratio, organ), std::string(target), std::move(meta)};
}

TrainingTriplet build_prefix_triplet(std::string_view organ_text, std::string_view organ, TripletMeta meta,
                                     int n) {
  const auto target = text::trim(organ_text);
  if (target.empty()) throw Error(Errc::EmptyTarget);
  meta.organ = std::string(organ);
  meta.condition = Condition::PrefixOnly;
  return {instruction_for(organ, Condition::PrefixOnly), prefix_tokens(target, n), std::string(target),
          std::move(meta)};
}

TrainingTriplet augment_reorder(const TrainingTriplet& triplet, std::uint64_t seed) {
  TrainingTriplet out = triplet;
  const auto sentences = split_sentences(triplet.target);
  const std::set<std::string> distinct(sentences.begin(), sentences.end());
  if (distinct.size() < 2) return out;
  SeededRng rng(seed);
  auto perm = sentences;
  do {
    rng.shuffle(perm);
  } while (perm == sentences);
  out.target = text::join(perm, " ");
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

constexpr std::string_view kKidneyFiller[] = {
    "No hydronephrosis is seen.",
    "There is no perinephric stranding.",
    "No renal calculi are identified.",
    "The collecting systems are not dilated.",
    "Corticomedullary differentiation is preserved.",
};

struct OtherOrganLine {
  std::string_view heading;
  std::string_view options[2];
};

constexpr OtherOrganLine kOtherOrgans[] = {
    {"LIVER", {"The liver is normal in size and attenuation.", "No focal hepatic lesion."}},
    {"SPLEEN", {"The spleen is unremarkable.", "The spleen is normal in size."}},
    {"PANCREAS", {"The pancreas is unremarkable.", "No pancreatic ductal dilatation."}},
    {"ADRENALS", {"The adrenal glands are normal.", "No adrenal nodule."}},
    {"BLADDER", {"The urinary bladder is unremarkable.", "The bladder is well distended."}},
};

OrganFeatureSet synth_kidney(std::string organ, std::uint32_t label, double volume_cm3, bool abnormal,
                             SeededRng& rng) {
  OrganFeatureSet f;
  f.organ = std::move(organ);
  f.label_id = label;
  // 1 mm isotropic voxels: volume is an exact multiple of 0.001 cm3.
  f.voxel_count = std::llround(volume_cm3 * 1000.0);
  f.volume_cm3 = static_cast<double>(f.voxel_count) / 1000.0;
  const double v_mm3 = static_cast<double>(f.voxel_count);
  f.sphericity = rng.uniform(0.70, 0.85);
  f.surface_area_mm2 = std::cbrt(std::numbers::pi) * std::pow(6.0 * v_mm3, 2.0 / 3.0) / f.sphericity;
  // Ellipsoid extents in proportion 1 : 0.55 : 0.45 with the same volume.
  const double k = std::cbrt(6.0 * v_mm3 / (std::numbers::pi * 0.55 * 0.45));
  f.bbox_mm = {k, 0.55 * k, 0.45 * k};
  f.intensity_mean = abnormal ? rng.uniform(10.0, 50.0) : rng.uniform(20.0, 40.0);
  f.intensity_std = rng.uniform(10.0, 25.0);
  f.intensity_min = f.intensity_mean - 3.0 * f.intensity_std;
  f.intensity_max = f.intensity_mean + 3.0 * f.intensity_std;
  f.intensity_entropy = rng.uniform(1.0, 2.0);
  return f;
}

}  // namespace

std::vector<SyntheticCase> generate_synthetic_corpus(int n_cases, std::uint64_t seed,
                                                     const SyntheticParams& p) {
  if (n_cases < 1) throw Error(Errc::InvalidArgument, "n_cases must be >= 1");
  SeededRng rng(seed);
  const auto& rules = completion::RuleSet::standard();
  std::vector<SyntheticCase> out;
  out.reserve(static_cast<std::size_t>(n_cases));

  for (int i = 0; i < n_cases; ++i) {
    SyntheticCase c;
    char id[32];
    std::snprintf(id, sizeof id, "case_%05d", i);
    c.case_id = id;

    const bool abnormal = rng.bernoulli(p.abnormal_fraction);
    double left = 0, right = 0;
    if (!abnormal) {
      left = rng.uniform(p.normal_min_cm3, p.normal_max_cm3);
      do {
        right = rng.uniform(p.normal_min_cm3, p.normal_max_cm3);
      } while (!(left / right >= p.normal_ratio_min && left / right <= p.normal_ratio_max));
    } else {
      const bool left_side = rng.bernoulli(0.5);
      const bool low = rng.bernoulli(0.5);
      const double odd = low ? rng.uniform(p.low_min_cm3, p.low_max_cm3) : rng.uniform(p.high_min_cm3, p.high_max_cm3);
      const double typical = rng.uniform(p.normal_min_cm3, p.normal_max_cm3);
      left = left_side ? odd : typical;
      right = left_side ? typical : odd;
    }
    c.label = abnormal ? CaseLabel::Abnormal : CaseLabel::Normal;
    c.left = synth_kidney("kidney_left", 1, left, abnormal, rng);
    c.right = synth_kidney("kidney_right", 2, right, abnormal, rng);
    c.ratio = radiomics::paired_ratio(c.left, c.right);

    const OrganFeatureSet pair[2] = {c.left, c.right};
    const auto payload = promptgen::render_input_payload(pair, c.ratio, "kidney");
    const std::string finding = rules.select(payload);
    c.kidney_sentences.push_back(finding);

    std::vector<std::size_t> filler(std::size(kKidneyFiller));
    for (std::size_t k = 0; k < filler.size(); ++k) filler[k] = k;
    rng.shuffle(filler);
    const auto n_filler = static_cast<std::size_t>(rng.below(3));
    for (std::size_t k = 0; k < n_filler; ++k) c.kidney_sentences.emplace_back(kKidneyFiller[filler[k]]);

    std::string report = "EXAMINATION: CT urography.\nFINDINGS:\nKIDNEYS: " + text::join(c.kidney_sentences, " ") + "\n";
    for (const auto& organ : kOtherOrgans) {
      report += std::string(organ.heading) + ": " + std::string(organ.options[rng.below(2)]) + "\n";
    }
    report += abnormal ? "IMPRESSION: Abnormal renal morphology as described above.\n"
                       : "IMPRESSION: No acute abnormality.\n";
    c.report = std::move(report);
    out.push_back(std::move(c));
  }
  return out;
}

json synthetic_manifest(int n_cases, std::uint64_t seed, const SyntheticParams& p) {
  return {{"generator", "synthetic-kidney"},
          {"seed", seed},
          {"n_cases", n_cases},
          {"abnormal_fraction", p.abnormal_fraction},
          {"normal_volume_cm3", {p.normal_min_cm3, p.normal_max_cm3}},
          {"normal_ratio", {p.normal_ratio_min, p.normal_ratio_max}},
          {"abnormal_low_cm3", {p.low_min_cm3, p.low_max_cm3}},
          {"abnormal_high_cm3", {p.high_min_cm3, p.high_max_cm3}},
          {"spacing_mm", {1.0, 1.0, 1.0}}};
}

json case_features_json(const SyntheticCase& c) {
  return {{"case_id", c.case_id},
          {"label", std::string(label_name(c.label))},
          {"organ", "kidney"},
          {"features", json::array({json(c.left), json(c.right)})},
          {"ratio", json(c.ratio)}};
}

FeatureFile parse_feature_file(const json& j) {
  FeatureFile f;
  try {
    const json* list = &j;
    if (j.is_object()) {
      if (!j.contains("features")) throw Error(Errc::ParseError, "feature file has no 'features'");
      list = &j["features"];
      if (j.contains("ratio") && !j["ratio"].is_null()) f.ratio = j["ratio"].get<LateralityRatio>();
      if (j.contains("label")) f.label = parse_label(j["label"].get<std::string>());
    }
    if (!list->is_array()) throw Error(Errc::ParseError, "'features' must be an array");
    for (const auto& item : *list) f.features.push_back(item.get<OrganFeatureSet>());
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("feature file: ") + e.what());
  }
  return f;
}

FeatureFile select_organ(const FeatureFile& file, std::string_view organ) {
  const auto name = text::to_lower(text::trim(organ));
  FeatureFile out;
  out.label = file.label;
  out.features.reserve(file.features.size());  // keeps left/right valid
  const OrganFeatureSet *left = nullptr, *right = nullptr;
  for (const auto& f : file.features) {
    const OrganFeatureSet one[1] = {f};
    if (text::to_lower(f.organ) != name && promptgen::infer_organ(one) != name) continue;
    out.features.push_back(f);
    const auto lower = text::to_lower(f.organ);
    if (lower.find("left") != std::string::npos) left = &out.features.back();
    if (lower.find("right") != std::string::npos) right = &out.features.back();
  }
  if (out.features.empty()) throw Error(Errc::EmptyFeatures, "no feature sets for " + name);
  if (out.features.size() == 2 && left && right) {
    out.ratio = file.ratio ? *file.ratio : radiomics::paired_ratio(*left, *right);
  }
  return out;
}

json to_json(const TrainingTriplet& t) {
  return {{"instruct", t.instruct},
          {"input", t.input},
          {"target", t.target},
          {"meta",
           {{"report_id", t.meta.report_id},
            {"organ", t.meta.organ},
            {"condition", std::string(condition_name(t.meta.condition))},
            {"label", std::string(label_name(t.meta.label))}}}};
}

TrainingTriplet triplet_from_json(const json& j) {
  try {
    TrainingTriplet t;
    t.instruct = j.at("instruct").get<std::string>();
    t.input = j.at("input").get<std::string>();
    t.target = j.at("target").get<std::string>();
    if (j.contains("meta")) {
      const auto& m = j["meta"];
      t.meta.report_id = m.value("report_id", std::string());
      t.meta.organ = m.value("organ", std::string());
      t.meta.condition = parse_condition(m.value("condition", std::string("WithRadiomics")));
      t.meta.label = parse_label(m.value("label", std::string("Unknown")));
    }
    return t;
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("triplet: ") + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(Errc::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const std::filesystem::path& path, std::span<const json> rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace reportpilot::corpus
