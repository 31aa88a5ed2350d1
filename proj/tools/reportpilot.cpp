#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "reportpilot/corpus.hpp"
#include "reportpilot/imaging.hpp"
#include "reportpilot/metrics.hpp"
#include "reportpilot/promptgen.hpp"
#include "reportpilot/radiomics.hpp"
#include "reportpilot/remote_backend.hpp"
#include "reportpilot/rule_backend.hpp"
#include "reportpilot/service.hpp"
#include "reportpilot/text.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace reportpilot;

namespace {

enum Exit { kOk = 0, kDomain = 1, kUsage = 2, kEnvironment = 3 };

int exit_code(const Error& e) {
  switch (e.code()) {
    case Errc::InvalidConfig: return kUsage;
    case Errc::IoError: return kEnvironment;
    default: return kDomain;
  }
}

void emit(const std::string& out_path, const std::string& content) {
  if (out_path.empty()) {
    std::cout << content;
  } else {
    corpus::write_file(out_path, content);
  }
}

json read_json(const fs::path& path) {
  const auto text = corpus::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, path.string() + ": " + e.what());
  }
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// .nii files are NIfTI; anything else needs a raw JSON header.
imaging::Image load_image(const std::string& path, const std::string& header_path, bool as_mask,
                          const imaging::LabelTable& table) {
  const auto bytes = corpus::read_file(path);
  if (!header_path.empty()) return imaging::parse_raw(corpus::read_file(header_path), imaging::as_bytes(bytes));
  if (!ends_with(text::to_lower(path), ".nii"))
    throw Error(Errc::UnsupportedFormat, path + ": expected .nii, or a raw file with --*-header");
  if (as_mask) return imaging::parse_nifti_mask(imaging::as_bytes(bytes), table);
  return imaging::parse_nifti_volume(imaging::as_bytes(bytes));
}

struct RemoteFlags {
  std::string base_url, model, api_key_env = "OPENAI_API_KEY";
  double timeout_s = 30.0;
};

void add_backend_flags(CLI::App* cmd, std::string& backend, std::string& rules, RemoteFlags& remote) {
  cmd->add_option("--backend", backend, "rule or remote")->check(CLI::IsMember({"rule", "remote"}));
  cmd->add_option("--rules", rules, "rule file for the rule backend");
  cmd->add_option("--base-url", remote.base_url, "remote server, e.g. http://127.0.0.1:8000");
  cmd->add_option("--model", remote.model, "remote model name");
  cmd->add_option("--api-key-env", remote.api_key_env, "variable holding the credential; empty for none");
  cmd->add_option("--timeout", remote.timeout_s, "remote timeout in seconds");
}

std::shared_ptr<completion::Backend> backend_from(const std::string& kind, const std::string& rules,
                                                  const RemoteFlags& remote) {
  service::BackendConfig c;
  c.kind = kind;
  c.rules_path = rules;
  c.remote.base_url = remote.base_url;
  c.remote.model = remote.model;
  c.remote.api_key_env = remote.api_key_env;
  c.remote.timeout_s = remote.timeout_s;
  return service::make_backend(c);
}

std::string joined(const std::vector<std::string>& tokens) {
  std::string s;
  for (const auto& t : tokens) s += t;
  return std::string(text::trim(s));
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string image, mask, labels, image_header, mask_header, out;
  std::vector<std::string> organs;
};

void run_analyze(const AnalyzeArgs& a) {
  imaging::LabelTable table;
  if (!a.labels.empty()) table = imaging::parse_label_table(corpus::read_file(a.labels));
  auto image = load_image(a.image, a.image_header, false, {});
  auto mask = load_image(a.mask, a.mask_header, true, table);
  auto* volume = std::get_if<imaging::VoxelVolume>(&image);
  auto* labels = std::get_if<imaging::LabelMask>(&mask);
  if (!volume) throw Error(Errc::MalformedHeader, a.image + " is a mask, expected an image");
  if (!labels) throw Error(Errc::MalformedHeader, a.mask + " is an image, expected a mask");

  json features = json::array();
  std::map<std::string, radiomics::OrganFeatureSet> by_name;
  for (const auto& organ : a.organs) {
    auto f = radiomics::compute_features(*volume, *labels, text::to_lower(organ));
    by_name[f.organ] = f;
    features.push_back(f);
  }
  json out = {{"features", features}};
  if (by_name.count("kidney_left") && by_name.count("kidney_right"))
    out["ratio"] = radiomics::paired_ratio(by_name["kidney_left"], by_name["kidney_right"]);
  emit(a.out, out.dump(2) + "\n");
}

struct PromptArgs {
  std::string features, organ, prefix, templates;
  std::vector<std::string> extras;
};

std::vector<promptgen::ExtraFeature> parse_extras(const std::vector<std::string>& names) {
  std::vector<promptgen::ExtraFeature> out;
  for (const auto& n : names) {
    if (n == "surface_area") out.push_back(promptgen::ExtraFeature::SurfaceArea);
    else if (n == "sphericity") out.push_back(promptgen::ExtraFeature::Sphericity);
    else if (n == "intensity_mean") out.push_back(promptgen::ExtraFeature::IntensityMean);
    else if (n == "intensity_std") out.push_back(promptgen::ExtraFeature::IntensityStd);
    else if (n == "entropy") out.push_back(promptgen::ExtraFeature::Entropy);
    else throw Error(Errc::InvalidArgument, "unknown extra feature '" + n + "'");
  }
  return out;
}

void run_prompt(const PromptArgs& a) {
  const auto file = corpus::select_organ(corpus::parse_feature_file(read_json(a.features)), a.organ);
  promptgen::RenderOptions options;
  options.extras = parse_extras(a.extras);
  std::optional<promptgen::PromptTemplates> templates;
  if (!a.templates.empty()) {
    templates = promptgen::PromptTemplates::from_json(corpus::read_file(a.templates));
    options.templates = &*templates;
  }
  const auto prompt = promptgen::render_prompt(file.features, file.ratio, a.organ, a.prefix, options);
  std::cout << prompt.rendered << "\n";
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  int n = 100;
  std::uint64_t seed = 0;
  std::string out;
};

void run_synth(const SynthArgs& a) {
  const fs::path dir(a.out);
  const auto cases = corpus::generate_synthetic_corpus(a.n, a.seed);
  fs::create_directories(dir / "reports");
  fs::create_directories(dir / "features");
  for (const auto& c : cases) {
    corpus::write_file(dir / "reports" / (c.case_id + ".txt"), c.report);
    corpus::write_file(dir / "features" / (c.case_id + ".json"), corpus::case_features_json(c).dump(2) + "\n");
  }
  corpus::write_file(dir / "manifest.json", corpus::synthetic_manifest(a.n, a.seed).dump(2) + "\n");
  std::cerr << "wrote " << cases.size() << " cases to " << dir.string() << "\n";
}

struct BuildArgs {
  std::string reports, features, organ, condition = "with", out;
  int augment = 0;
  std::uint64_t seed = 0;
};

void run_build(const BuildArgs& a) {
  const auto condition = corpus::parse_condition(a.condition);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.reports)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<json> rows;
  int skipped = 0;
  for (const auto& path : files) {
    const auto id = path.stem().string();
    const auto doc = corpus::parse_report_sections(corpus::read_file(path), id);
    std::string section;
    try {
      section = corpus::extract_organ_section(doc, a.organ);
    } catch (const Error& e) {
      if (e.code() != Errc::OrganNotMentioned) throw;
      ++skipped;
      continue;
    }
    const auto feature_path = fs::path(a.features) / (id + ".json");
    corpus::TripletMeta meta;
    meta.report_id = id;
    corpus::TrainingTriplet triplet;
    if (condition == corpus::Condition::WithRadiomics) {
      if (!fs::exists(feature_path)) throw Error(Errc::NotFound, "no feature file " + feature_path.string());
      const auto file = corpus::select_organ(corpus::parse_feature_file(read_json(feature_path)), a.organ);
      meta.label = file.label;
      triplet = corpus::build_triplet(file.features, file.ratio, section, a.organ, meta);
    } else {
      if (fs::exists(feature_path)) meta.label = corpus::parse_feature_file(read_json(feature_path)).label;
      triplet = corpus::build_prefix_triplet(section, a.organ, meta);
    }
    rows.push_back(corpus::to_json(triplet));
    for (int k = 0; k < a.augment; ++k) {
      const auto seed = a.seed * 1000003ULL + rows.size() * 31ULL + static_cast<std::uint64_t>(k);
      rows.push_back(corpus::to_json(corpus::augment_reorder(triplet, seed)));
    }
  }
  corpus::write_jsonl(a.out, rows);
  std::cerr << "wrote " << rows.size() << " triplets to " << a.out;
  if (skipped > 0) std::cerr << " (" << skipped << " reports without the organ skipped)";
  std::cerr << "\n";
}

struct SplitArgs {
  std::string in, train, test;
  std::uint64_t seed = 0;
  double ratio = 0.9;
};

void run_split(const SplitArgs& a) {
  std::vector<std::string> lines;
  {
    std::istringstream in(corpus::read_file(a.in));
    std::string line;
    while (std::getline(in, line)) {
      if (!text::trim(line).empty()) lines.push_back(line);
    }
  }
  auto [train, test] = corpus::split(std::move(lines), {a.ratio, a.seed});
  auto dump = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& l : v) s += l + "\n";
    return s;
  };
  corpus::write_file(a.train, dump(train));
  corpus::write_file(a.test, dump(test));
  std::cerr << "train " << train.size() << ", test " << test.size() << "\n";
}

// ---------------------------------------------------------------------------

struct CompleteArgs {
  std::string features, organ, prefix, in, out, backend = "rule", rules;
  RemoteFlags remote;
  int max_tokens = 64;
  int threads = 1;
};

void run_complete(const CompleteArgs& a) {
  auto backend = backend_from(a.backend, a.rules, a.remote);
  completion::BackendParams params;
  params.max_tokens = a.max_tokens;

  if (a.in.empty()) {
    if (a.features.empty() || a.organ.empty())
      throw Error(Errc::InvalidConfig, "complete needs --features and --organ, or --in");
    const auto file = corpus::select_organ(corpus::parse_feature_file(read_json(a.features)), a.organ);
    const auto prompt = promptgen::render_prompt(file.features, file.ratio, a.organ, a.prefix);
    emit(a.out, joined(completion::generate_all(*backend, prompt.rendered, params)) + "\n");
    return;
  }

  const auto rows = corpus::read_jsonl(a.in);
  std::vector<std::string> results(rows.size());
  std::vector<std::optional<Error>> errors(rows.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      try {
        const auto t = corpus::triplet_from_json(rows[i]);
        const auto prediction = joined(completion::generate_all(*backend, t.input, params));
        results[i] = json{{"report_id", t.meta.report_id},
                          {"organ", t.meta.organ},
                          {"condition", std::string(corpus::condition_name(t.meta.condition))},
                          {"label", std::string(corpus::label_name(t.meta.label))},
                          {"prediction", prediction}}
                         .dump();
      } catch (const Error& e) {
        errors[i] = e;
      }
    }
  };
  const int n_threads = std::max(1, a.threads);
  std::vector<std::jthread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (errors[i]) throw Error(errors[i]->code(), a.in + ":" + std::to_string(i + 1) + ": " + errors[i]->detail());
  }
  std::string out;
  for (const auto& r : results) out += r + "\n";
  emit(a.out, out);
}

struct EvalArgs {
  std::string pred, ref, out, dataset, model = "rule";
};

void run_eval(const EvalArgs& a) {
  const auto preds = corpus::read_jsonl(a.pred);
  const auto refs = corpus::read_jsonl(a.ref);
  if (preds.size() != refs.size())
    throw Error(Errc::LengthMismatch,
                std::to_string(preds.size()) + " predictions vs " + std::to_string(refs.size()) + " references");
  std::vector<metrics::EvalPair> pairs;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    metrics::EvalPair p;
    try {
      p.candidate = preds[i].contains("prediction") ? preds[i]["prediction"].get<std::string>()
                                                     : preds[i].at("text").get<std::string>();
      p.reference = refs[i].at("target").get<std::string>();
      std::string label = "Unknown";
      if (refs[i].contains("meta")) label = refs[i]["meta"].value("label", label);
      else if (refs[i].contains("label")) label = refs[i]["label"].get<std::string>();
      p.label = corpus::parse_label(label);
    } catch (const json::exception& e) {
      throw Error(Errc::ParseError, "line " + std::to_string(i + 1) + ": " + e.what());
    }
    pairs.push_back(std::move(p));
  }
  const auto results = metrics::evaluate_dataset(pairs);
  const auto dataset = a.dataset.empty() ? fs::path(a.ref).stem().string() : a.dataset;
  const auto report = metrics::report_json(results, dataset, a.model);
  if (!a.out.empty()) corpus::write_file(a.out, report.dump(2) + "\n");
  std::cout << metrics::report_table(results);
}

int run_serve(const std::string& config_path) {
  auto config = service::ServiceConfig::load(config_path);

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  service::Service svc(config);
  const int port = svc.bind();
  std::cerr << "listening on " << config.host << ":" << port << "\n";
  std::jthread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    svc.stop();
  });
  svc.run();
  pthread_kill(waiter.native_handle(), SIGTERM);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Radiology report completion toolkit"};
  app.require_subcommand(1);

  AnalyzeArgs analyze;
  auto* c_analyze = app.add_subcommand("analyze", "Compute organ features from an image and mask");
  c_analyze->add_option("--image", analyze.image, "image volume (.nii or raw)")->required();
  c_analyze->add_option("--mask", analyze.mask, "label mask (.nii or raw)")->required();
  c_analyze->add_option("--labels", analyze.labels, "label table JSON for NIfTI masks");
  c_analyze->add_option("--image-header", analyze.image_header, "raw image header JSON");
  c_analyze->add_option("--mask-header", analyze.mask_header, "raw mask header JSON");
  c_analyze->add_option("--organ", analyze.organs, "organ names")->required();
  c_analyze->add_option("--out", analyze.out, "output JSON; stdout when omitted");

  PromptArgs prompt;
  auto* c_prompt = app.add_subcommand("prompt", "Render the informative prompt");
  c_prompt->add_option("--features", prompt.features, "feature JSON")->required();
  c_prompt->add_option("--organ", prompt.organ, "organ")->required();
  c_prompt->add_option("--prefix", prompt.prefix, "report text so far");
  c_prompt->add_option("--extras", prompt.extras,
                       "surface_area, sphericity, intensity_mean, intensity_std, entropy");
  c_prompt->add_option("--templates", prompt.templates, "template override JSON");

  auto* c_dataset = app.add_subcommand("dataset", "Build, split and synthesize datasets");
  c_dataset->require_subcommand(1);
  SynthArgs synth;
  auto* c_synth = c_dataset->add_subcommand("synth", "Generate a synthetic paired corpus");
  c_synth->add_option("--n", synth.n, "number of cases")->required();
  c_synth->add_option("--seed", synth.seed, "seed")->required();
  c_synth->add_option("--out", synth.out, "output directory")->required();
  BuildArgs build;
  auto* c_build = c_dataset->add_subcommand("build", "Build instruct/input/target triplets");
  c_build->add_option("--reports", build.reports, "directory of .txt reports")->required();
  c_build->add_option("--features", build.features, "directory of {report_id}.json feature files")->required();
  c_build->add_option("--organ", build.organ, "organ")->required();
  c_build->add_option("--condition", build.condition, "with or prefix")
      ->check(CLI::IsMember({"with", "prefix"}))
      ->required();
  c_build->add_option("--out", build.out, "output JSONL")->required();
  c_build->add_option("--augment", build.augment, "sentence-reordered copies per triplet");
  c_build->add_option("--seed", build.seed, "augmentation seed");
  SplitArgs split;
  auto* c_split = c_dataset->add_subcommand("split", "Seeded train/test split of a JSONL file");
  c_split->add_option("--in", split.in, "input JSONL")->required();
  c_split->add_option("--seed", split.seed, "seed")->required();
  c_split->add_option("--ratio", split.ratio, "train fraction");
  c_split->add_option("--train", split.train, "train JSONL")->required();
  c_split->add_option("--test", split.test, "test JSONL")->required();

  CompleteArgs complete;
  auto* c_complete = app.add_subcommand("complete", "Generate a completion");
  c_complete->add_option("--features", complete.features, "feature JSON");
  c_complete->add_option("--organ", complete.organ, "organ");
  c_complete->add_option("--prefix", complete.prefix, "report text so far");
  c_complete->add_option("--in", complete.in, "triplet JSONL; completes every input");
  c_complete->add_option("--out", complete.out, "output; stdout when omitted");
  c_complete->add_option("--threads", complete.threads, "worker threads for --in");
  c_complete->add_option("--max-tokens", complete.max_tokens, "token limit")->check(CLI::PositiveNumber);
  add_backend_flags(c_complete, complete.backend, complete.rules, complete.remote);

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "BLEU and ROUGE-L of predictions against targets");
  c_eval->add_option("--pred", eval.pred, "prediction JSONL")->required();
  c_eval->add_option("--ref", eval.ref, "reference triplet JSONL")->required();
  c_eval->add_option("--out", eval.out, "report JSON");
  c_eval->add_option("--dataset", eval.dataset, "dataset name for the report");
  c_eval->add_option("--model", eval.model, "model name for the report");

  std::string config_path;
  auto* c_serve = app.add_subcommand("serve", "Run the HTTP service");
  c_serve->add_option("--config", config_path, "service config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*c_analyze) run_analyze(analyze);
    else if (*c_prompt) run_prompt(prompt);
    else if (*c_synth) run_synth(synth);
    else if (*c_build) run_build(build);
    else if (*c_split) run_split(split);
    else if (*c_complete) run_complete(complete);
    else if (*c_eval) run_eval(eval);
    else if (*c_serve) return run_serve(config_path);
    return kOk;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDomain;
  }
}
