#include "reportpilot/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "reportpilot/corpus.hpp"
#include "reportpilot/promptgen.hpp"
#include "reportpilot/radiomics.hpp"
#include "reportpilot/router.hpp"
#include "reportpilot/rule_backend.hpp"
#include "reportpilot/text.hpp"

namespace reportpilot::service {

namespace fs = std::filesystem;
using json = nlohmann::json;
using completion::CompletionSession;
using completion::FeedbackEvent;
using completion::SuggestionStatus;

// ---------------------------------------------------------------------------
// Configuration

ServiceConfig ServiceConfig::from_json(const json& j, const fs::path& base_dir) {
  auto resolve = [&](const std::string& p) -> fs::path {
    fs::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };
  try {
    if (!j.is_object()) throw Error(Errc::InvalidConfig, "config must be a JSON object");
    for (const auto& [key, _] : j.items())
      if (key != "server" && key != "data_dir" && key != "backend" && key != "suggestion")
        throw Error(Errc::InvalidConfig, "unknown key '" + key + "'");
    ServiceConfig c;
    if (j.contains("server")) {
      const auto& s = j.at("server");
      c.host = s.value("host", c.host);
      c.port = s.value("port", c.port);
    }
    if (c.port < 0 || c.port > 65535) throw Error(Errc::InvalidConfig, "server.port out of range");
    if (!j.contains("data_dir")) throw Error(Errc::InvalidConfig, "data_dir is required");
    c.data_dir = resolve(j.at("data_dir").get<std::string>());
    if (j.contains("backend")) {
      const auto& b = j.at("backend");
      c.backend.kind = b.value("kind", c.backend.kind);
      if (b.contains("rules_path")) c.backend.rules_path = resolve(b.at("rules_path").get<std::string>());
      c.backend.token_delay_ms = b.value("token_delay_ms", 0);
      c.backend.remote.base_url = b.value("base_url", std::string());
      c.backend.remote.model = b.value("model", std::string());
      c.backend.remote.api_key_env = b.value("api_key_env", c.backend.remote.api_key_env);
      c.backend.remote.timeout_s = b.value("timeout_s", c.backend.remote.timeout_s);
    }
    if (c.backend.kind != "rule" && c.backend.kind != "remote")
      throw Error(Errc::InvalidConfig, "backend.kind must be \"rule\" or \"remote\"");
    if (c.backend.token_delay_ms < 0) throw Error(Errc::InvalidConfig, "backend.token_delay_ms must be >= 0");
    if (j.contains("suggestion")) c.max_tokens_default = j.at("suggestion").value("max_tokens_default", 64);
    if (c.max_tokens_default < 1) throw Error(Errc::InvalidConfig, "suggestion.max_tokens_default must be >= 1");
    return c;
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, e.what());
  }
}

ServiceConfig ServiceConfig::load(const fs::path& path) {
  std::string text;
  try {
    text = corpus::read_file(path);
  } catch (const Error& e) {
    throw Error(Errc::InvalidConfig, e.detail());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

std::shared_ptr<completion::Backend> make_backend(const BackendConfig& config) {
  if (config.kind == "remote") return std::make_shared<completion::RemoteBackend>(config.remote);
  if (config.kind != "rule") throw Error(Errc::InvalidConfig, "unknown backend kind '" + config.kind + "'");
  auto rules = completion::RuleSet::standard();
  if (!config.rules_path.empty()) {
    try {
      rules = completion::RuleSet::from_json(corpus::read_file(config.rules_path));
    } catch (const Error& e) {
      if (e.code() == Errc::InvalidConfig) throw;
      throw Error(Errc::InvalidConfig, e.detail());
    }
  }
  return std::make_shared<completion::RuleBackend>(std::move(rules),
                                                   std::chrono::milliseconds(config.token_delay_ms));
}

int http_status(Errc code) {
  switch (code) {
    case Errc::NotFound: return 404;
    case Errc::SuggestionInFlight:
    case Errc::NoSuggestion:
    case Errc::NotComplete:
    case Errc::NotAnalyzed: return 409;
    case Errc::UnsupportedFormat: return 415;
    case Errc::LabelAbsent:
    case Errc::ZeroVolume:
    case Errc::UnknownOrgan:
    case Errc::OrganMismatch:
    case Errc::EmptyFeatures:
    case Errc::NoPipelineMatches: return 422;
    case Errc::BackendUnavailable:
    case Errc::StreamCorrupt: return 502;
    case Errc::BackendTimeout: return 504;
    case Errc::IoError:
    case Errc::InvalidConfig: return 500;
    default: return 400;
  }
}

// ---------------------------------------------------------------------------
// Slices

json rle_encode(std::span<const std::uint32_t> labels) {
  json runs = json::array();
  std::size_t i = 0;
  while (i < labels.size()) {
    std::size_t j = i;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    runs.push_back({labels[i], j - i});
    i = j;
  }
  return runs;
}

std::vector<std::uint32_t> rle_decode(const json& runs) {
  if (!runs.is_array()) throw Error(Errc::ParseError, "runs must be an array");
  std::vector<std::uint32_t> out;
  for (const auto& r : runs) {
    if (!r.is_array() || r.size() != 2 || !r[0].is_number_unsigned() || !r[1].is_number_unsigned())
      throw Error(Errc::ParseError, "run must be [label, count]");
    const auto count = r[1].get<std::size_t>();
    if (count == 0) throw Error(Errc::ParseError, "run count must be >= 1");
    out.insert(out.end(), count, r[0].get<std::uint32_t>());
  }
  return out;
}

std::array<int, 3> palette_color(std::string_view organ) {
  const auto name = text::to_lower(organ);
  static const std::pair<std::string_view, std::array<int, 3>> kColors[] = {
      {"kidney", {0, 0, 255}},      {"liver", {165, 42, 42}},    {"spleen", {128, 0, 128}},
      {"pancreas", {255, 165, 0}},  {"bladder", {255, 255, 0}},  {"aorta", {255, 0, 0}},
      {"adrenal", {0, 255, 255}},   {"lung", {0, 200, 0}},       {"gallbladder", {0, 128, 0}},
      {"stomach", {255, 192, 203}}, {"heart", {220, 20, 60}},    {"colon", {210, 180, 140}},
  };
  for (const auto& [key, rgb] : kColors) {
    if (name.rfind(key, 0) == 0) return rgb;
  }
  return {128, 128, 128};
}

// ---------------------------------------------------------------------------
// Durable files

namespace {

void fsync_dir(const fs::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd >= 0) {
    ::fsync(fd);
    ::close(fd);
  }
}

void write_durable(const fs::path& path, std::string_view content) {
  fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(Errc::IoError, "cannot write " + tmp);
  std::size_t off = 0;
  while (off < content.size()) {
    const auto n = ::write(fd, content.data() + off, content.size() - off);
    if (n <= 0) {
      ::close(fd);
      throw Error(Errc::IoError, "write failed for " + tmp);
    }
    off += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  fs::rename(tmp, path);
  fsync_dir(path.parent_path());
}

json event_json(const FeedbackEvent& e) {
  return {{"kind", std::string(completion::feedback_kind_name(e.kind))},
          {"timestamp_us", e.timestamp_us},
          {"payload", e.payload}};
}

FeedbackEvent event_from_json(const json& j) {
  return {completion::parse_feedback_kind(j.at("kind").get<std::string>()), j.at("timestamp_us").get<std::int64_t>(),
          j.at("payload").get<std::string>()};
}

struct Scan {
  std::vector<EventLog::Record> records;
  std::size_t valid_bytes = 0;
};

Scan scan_log(const fs::path& path) {
  Scan scan;
  if (!fs::exists(path)) return scan;
  const auto content = corpus::read_file(path);
  std::size_t pos = 0;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    if (nl == std::string::npos) break;  // torn final write
    const bool last = nl + 1 == content.size();
    std::optional<EventLog::Record> record;
    try {
      const auto j = json::parse(std::string_view(content).substr(pos, nl - pos));
      record = EventLog::Record{j.at("seq").get<std::int64_t>(), event_from_json(j.at("event"))};
    } catch (const std::exception& e) {
      if (last) break;
      throw Error(Errc::ParseError, path.string() + ": " + e.what());
    }
    const auto expected = static_cast<std::int64_t>(scan.records.size()) + 1;
    if (record->seq != expected)
      throw Error(Errc::ParseError, path.string() + ": seq " + std::to_string(record->seq) + ", expected " +
                                        std::to_string(expected));
    scan.records.push_back(std::move(*record));
    pos = nl + 1;
    scan.valid_bytes = pos;
  }
  return scan;
}

}  // namespace

// ---------------------------------------------------------------------------
// EventLog

EventLog::EventLog(fs::path path, std::string session_id) : path_(std::move(path)), session_id_(std::move(session_id)) {
  fs::create_directories(path_.parent_path());
  const auto scan = scan_log(path_);
  seq_ = static_cast<std::int64_t>(scan.records.size());
  if (fs::exists(path_) && fs::file_size(path_) != scan.valid_bytes) fs::resize_file(path_, scan.valid_bytes);
  fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(Errc::IoError, "cannot open " + path_.string());
  fsync_dir(path_.parent_path());
}

EventLog::~EventLog() {
  if (fd_ >= 0) ::close(fd_);
}

std::int64_t EventLog::append(const FeedbackEvent& e) {
  std::lock_guard lock(mu_);
  const auto seq = seq_ + 1;
  const std::string line =
      json{{"session_id", session_id_}, {"seq", seq}, {"event", event_json(e)}}.dump() + "\n";
  std::size_t off = 0;
  while (off < line.size()) {
    const auto n = ::write(fd_, line.data() + off, line.size() - off);
    if (n <= 0) throw Error(Errc::IoError, "append failed for " + path_.string());
    off += static_cast<std::size_t>(n);
  }
  if (::fsync(fd_) != 0) throw Error(Errc::IoError, "fsync failed for " + path_.string());
  seq_ = seq;
  return seq;
}

std::int64_t EventLog::last_seq() const {
  std::lock_guard lock(mu_);
  return seq_;
}

std::vector<EventLog::Record> EventLog::read(const fs::path& path) { return scan_log(path).records; }

// ---------------------------------------------------------------------------
// Service

namespace {

struct Study {
  std::string id;
  router::StudyDescriptor descriptor;
  imaging::VoxelVolume volume;
  imaging::LabelMask mask;
  router::RouteDecision route;

  std::mutex mu;
  std::map<std::string, radiomics::OrganFeatureSet> features;
  std::map<std::string, radiomics::LateralityRatio> ratios;  // by base organ
};

struct SessionEntry {
  std::string study_id;
  std::unique_ptr<EventLog> log;
  std::unique_ptr<CompletionSession> session;  // destroyed before the log
};

json route_json(const router::RouteDecision& r) {
  return {{"pipeline_id", r.pipeline_id},
          {"score", r.score},
          {"matched_rules", r.matched_rules},
          {"matched_keywords", r.matched_keywords}};
}

router::RouteDecision route_from_json(const json& j) {
  return {j.at("pipeline_id").get<std::string>(), j.at("score").get<double>(),
          j.at("matched_rules").get<std::vector<std::string>>(),
          j.at("matched_keywords").get<std::vector<std::string>>()};
}

bool safe_id(std::string_view id) {
  return !id.empty() && id.size() <= 64 && std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_';
  });
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

enum class Format { Nifti, Raw };

Format format_of(const std::string& filename, bool has_header) {
  const auto name = text::to_lower(filename);
  if (ends_with(name, ".nii")) return Format::Nifti;
  if (ends_with(name, ".raw") || ends_with(name, ".bin")) return Format::Raw;
  if (name.empty()) return has_header ? Format::Raw : Format::Nifti;
  throw Error(Errc::UnsupportedFormat, "unsupported file '" + filename + "'; expected .nii or .raw");
}

std::string_view format_name(Format f) { return f == Format::Nifti ? "nifti" : "raw"; }

Format parse_format(std::string_view s) {
  if (s == "nifti") return Format::Nifti;
  if (s == "raw") return Format::Raw;
  throw Error(Errc::ParseError, "unknown stored format '" + std::string(s) + "'");
}

imaging::VoxelVolume load_volume(Format f, const std::string& bytes, const std::string& header,
                                 imaging::Modality modality) {
  if (f == Format::Nifti) return imaging::parse_nifti_volume(imaging::as_bytes(bytes), modality);
  auto img = imaging::parse_raw(header, imaging::as_bytes(bytes));
  if (auto* v = std::get_if<imaging::VoxelVolume>(&img)) return std::move(*v);
  throw Error(Errc::MalformedHeader, "image header declares kind mask");
}

imaging::LabelMask load_mask(Format f, const std::string& bytes, const std::string& header,
                             const std::string& labels) {
  if (f == Format::Nifti) {
    const auto table = labels.empty() ? imaging::LabelTable{} : imaging::parse_label_table(labels);
    return imaging::parse_nifti_mask(imaging::as_bytes(bytes), table);
  }
  auto img = imaging::parse_raw(header, imaging::as_bytes(bytes));
  if (auto* m = std::get_if<imaging::LabelMask>(&img)) return std::move(*m);
  throw Error(Errc::MalformedHeader, "mask header declares kind image");
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const Error& e) {
  send_json(res, http_status(e.code()), {{"error", std::string(e.name())}, {"detail", e.detail()}});
}

json parse_body(const httplib::Request& req) {
  if (text::trim(req.body).empty()) return json::object();
  try {
    auto j = json::parse(req.body);
    if (!j.is_object()) throw Error(Errc::ParseError, "request body must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw Error(Errc::ParseError, std::string("request body: ") + e.what());
  }
}

std::string sse(std::string_view event, const json& data) {
  return "event: " + std::string(event) + "\ndata: " + data.dump() + "\n\n";
}

}  // namespace

struct Service::Impl {
  ServiceConfig config;
  std::shared_ptr<completion::Backend> backend;
  httplib::Server server;
  std::thread thread;
  int port = -1;

  std::mutex studies_mu;
  std::map<std::string, std::shared_ptr<Study>> studies;
  std::mutex sessions_mu;
  std::map<std::string, std::shared_ptr<SessionEntry>> sessions;

  fs::path study_dir(const std::string& id) const { return config.data_dir / "studies" / id; }
  fs::path session_dir(const std::string& id) const { return config.data_dir / "sessions" / id; }

  Impl(ServiceConfig c, std::shared_ptr<completion::Backend> b) : config(std::move(c)), backend(std::move(b)) {
    if (!backend) backend = make_backend(config.backend);
    fs::create_directories(config.data_dir / "studies");
    fs::create_directories(config.data_dir / "sessions");
    routes();
  }

  template <class F>
  httplib::Server::Handler guard(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
      try {
        f(req, res);
      } catch (const Error& e) {
        send_error(res, e);
      } catch (const json::exception& e) {
        send_error(res, Error(Errc::ParseError, e.what()));
      } catch (const std::exception& e) {
        send_json(res, 500, {{"error", "Internal"}, {"detail", e.what()}});
      }
    };
  }

  // ---- studies

  std::shared_ptr<Study> find_study(const std::string& id) {
    if (!safe_id(id)) throw Error(Errc::NotFound, "study " + id);
    std::lock_guard lock(studies_mu);
    if (auto it = studies.find(id); it != studies.end()) return it->second;
    const auto dir = study_dir(id);
    if (!fs::exists(dir / "meta.json")) throw Error(Errc::NotFound, "study " + id);
    auto study = load_study(id, dir);
    studies[id] = study;
    return study;
  }

  static std::string read_opt(const fs::path& p) { return fs::exists(p) ? corpus::read_file(p) : std::string(); }

  std::shared_ptr<Study> load_study(const std::string& id, const fs::path& dir) {
    const auto meta = json::parse(corpus::read_file(dir / "meta.json"));
    auto s = std::make_shared<Study>();
    s->id = id;
    s->descriptor = router::parse_study_descriptor(corpus::read_file(dir / "descriptor.json"));
    s->volume = load_volume(parse_format(meta.at("image_format").get<std::string>()),
                            corpus::read_file(dir / "image.bin"), read_opt(dir / "image.header.json"),
                            s->descriptor.modality);
    s->mask = load_mask(parse_format(meta.at("mask_format").get<std::string>()), corpus::read_file(dir / "mask.bin"),
                        read_opt(dir / "mask.header.json"), read_opt(dir / "labels.json"));
    s->route = route_from_json(meta.at("route"));
    if (fs::exists(dir / "analysis.json")) {
      const auto a = json::parse(corpus::read_file(dir / "analysis.json"));
      for (const auto& f : a.at("features")) {
        auto fs_ = f.get<radiomics::OrganFeatureSet>();
        s->features[fs_.organ] = fs_;
      }
      for (const auto& [organ, r] : a.at("ratios").items()) s->ratios[organ] = r.get<radiomics::LateralityRatio>();
    }
    return s;
  }

  void post_study(const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data())
      throw Error(Errc::UnsupportedFormat, "POST /studies expects multipart/form-data");
    auto field = [&](const char* name) -> std::optional<httplib::MultipartFormData> {
      if (!req.has_file(name)) return std::nullopt;
      return req.get_file_value(name);
    };
    const auto image = field("image");
    const auto mask = field("mask");
    const auto descriptor = field("descriptor");
    if (!image || !mask) throw Error(Errc::InvalidArgument, "image and mask parts are required");
    if (!descriptor) throw Error(Errc::InvalidArgument, "descriptor part is required");
    const std::string image_header = field("image_header") ? field("image_header")->content : "";
    const std::string mask_header = field("mask_header") ? field("mask_header")->content : "";
    const std::string labels = field("labels") ? field("labels")->content : "";

    const auto image_fmt = format_of(image->filename, !image_header.empty());
    const auto mask_fmt = format_of(mask->filename, !mask_header.empty());

    auto study = std::make_shared<Study>();
    study->descriptor = router::parse_study_descriptor(descriptor->content);
    study->volume = load_volume(image_fmt, image->content, image_header, study->descriptor.modality);
    study->mask = load_mask(mask_fmt, mask->content, mask_header, labels);
    imaging::validate_alignment(study->volume, study->mask);
    study->route = router::route(study->descriptor);

    do {
      study->id = completion::new_id("st-");
    } while (fs::exists(study_dir(study->id)));
    const auto dir = study_dir(study->id);
    write_durable(dir / "image.bin", image->content);
    if (image_fmt == Format::Raw) write_durable(dir / "image.header.json", image_header);
    write_durable(dir / "mask.bin", mask->content);
    if (mask_fmt == Format::Raw) write_durable(dir / "mask.header.json", mask_header);
    if (!labels.empty()) write_durable(dir / "labels.json", labels);
    write_durable(dir / "descriptor.json", descriptor->content);
    // meta.json last: its presence marks a complete study.
    write_durable(dir / "meta.json", json{{"study_id", study->id},
                                          {"image_format", std::string(format_name(image_fmt))},
                                          {"mask_format", std::string(format_name(mask_fmt))},
                                          {"route", route_json(study->route)}}
                                         .dump(2));
    {
      std::lock_guard lock(studies_mu);
      studies[study->id] = study;
    }
    send_json(res, 201, {{"study_id", study->id}, {"route", route_json(study->route)}});
  }

  static std::string side_suffix_base(const std::string& organ, std::string_view suffix) {
    return ends_with(organ, suffix) ? organ.substr(0, organ.size() - suffix.size()) : std::string();
  }

  void analyze(const httplib::Request& req, httplib::Response& res) {
    auto study = find_study(req.matches[1]);
    const auto body = parse_body(req);
    std::vector<std::string> requested;
    if (body.contains("organs")) {
      for (const auto& o : body.at("organs")) {
        const auto name = text::to_lower(o.get<std::string>());
        if (study->mask.find_label(name) == 0 && study->mask.find_label(name + "_left") != 0 &&
            study->mask.find_label(name + "_right") != 0) {
          requested.push_back(name + "_left");
          requested.push_back(name + "_right");
        } else {
          requested.push_back(name);
        }
      }
    } else {
      for (const auto& [id, name] : study->mask.label_table) requested.push_back(name);
    }
    if (requested.empty()) throw Error(Errc::InvalidArgument, "no organs requested");

    std::lock_guard lock(study->mu);
    bool changed = false;
    for (const auto& organ : requested) {
      if (study->features.count(organ)) continue;
      study->features[organ] = radiomics::compute_features(study->volume, study->mask, organ);
      changed = true;
    }
    json ratios = json::object();
    std::optional<std::string> first_pair;
    for (const auto& organ : requested) {
      const auto base = side_suffix_base(organ, "_left");
      if (base.empty() || !study->features.count(base + "_right")) continue;
      if (!study->ratios.count(base)) {
        study->ratios[base] = radiomics::paired_ratio(study->features[organ], study->features[base + "_right"]);
        changed = true;
      }
      ratios[base] = study->ratios[base];
      if (!first_pair) first_pair = base;
    }
    if (changed) {
      json all_features = json::array();
      for (const auto& [organ, f] : study->features) all_features.push_back(f);
      json all_ratios = json::object();
      for (const auto& [organ, r] : study->ratios) all_ratios[organ] = r;
      write_durable(study_dir(study->id) / "analysis.json",
                    json{{"features", all_features}, {"ratios", all_ratios}}.dump(2));
    }

    json features = json::array();
    std::vector<std::string> seen;
    for (const auto& organ : requested) {
      if (std::find(seen.begin(), seen.end(), organ) != seen.end()) continue;
      seen.push_back(organ);
      features.push_back(study->features[organ]);
    }
    json out = {{"study_id", study->id}, {"features", features}, {"ratios", ratios}};
    if (first_pair) out["ratio"] = ratios[*first_pair];
    send_json(res, 200, out);
  }

  void slice(const httplib::Request& req, httplib::Response& res) {
    auto study = find_study(req.matches[1]);
    imaging::Axis axis;
    try {
      axis = imaging::parse_axis(req.matches[2].str());
    } catch (const Error& e) {
      throw Error(Errc::InvalidArgument, e.detail());
    }
    const std::string idx = req.matches[3];
    int index = 0;
    const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), index);
    if (ec != std::errc() || ptr != idx.data() + idx.size())
      throw Error(Errc::InvalidArgument, "slice index must be an integer");
    const auto raster = imaging::extract_slice(study->mask, axis, index);
    json palette = json::object(), table = json::object();
    for (const auto& [id, name] : study->mask.label_table) {
      const auto rgb = palette_color(name);
      palette[name] = {rgb[0], rgb[1], rgb[2]};
      table[std::to_string(id)] = name;
    }
    const char* axis_names[] = {"x", "y", "z"};
    send_json(res, 200,
              {{"axis", axis_names[static_cast<int>(raster.axis)]},
               {"index", raster.index},
               {"width", raster.width},
               {"height", raster.height},
               {"labels", rle_encode(raster.labels)},
               {"label_table", table},
               {"palette", palette}});
  }

  // ---- sessions

  std::shared_ptr<SessionEntry> open_session(const std::string& id, const std::string& study_id,
                                             const std::string& organ, const std::string& payload,
                                             const std::string& initial,
                                             std::vector<FeedbackEvent> events, bool restore) {
    auto entry = std::make_shared<SessionEntry>();
    entry->study_id = study_id;
    entry->log = std::make_unique<EventLog>(session_dir(id) / "events.jsonl", id);
    auto* log = entry->log.get();
    auto sink = [log](const FeedbackEvent& e) { log->append(e); };
    if (restore) {
      entry->session = CompletionSession::restore(id, organ, payload, initial, std::move(events), sink);
    } else {
      entry->session = std::make_unique<CompletionSession>(id, organ, payload, initial, sink);
    }
    return entry;
  }

  std::shared_ptr<SessionEntry> find_session(const std::string& id) {
    if (!safe_id(id)) throw Error(Errc::NotFound, "session " + id);
    std::lock_guard lock(sessions_mu);
    if (auto it = sessions.find(id); it != sessions.end()) return it->second;
    const auto dir = session_dir(id);
    if (!fs::exists(dir / "session.json")) throw Error(Errc::NotFound, "session " + id);
    const auto meta = json::parse(corpus::read_file(dir / "session.json"));
    std::vector<FeedbackEvent> events;
    for (auto& r : EventLog::read(dir / "events.jsonl")) events.push_back(std::move(r.event));
    auto entry = open_session(id, meta.at("study_id").get<std::string>(), meta.at("organ").get<std::string>(),
                              meta.at("feature_payload").get<std::string>(),
                              meta.at("initial_text").get<std::string>(), std::move(events), true);
    sessions[id] = entry;
    return entry;
  }

  void post_session(const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    if (!body.contains("study_id") || !body.contains("organ"))
      throw Error(Errc::InvalidArgument, "study_id and organ are required");
    auto study = find_study(body.at("study_id").get<std::string>());
    const auto organ = text::to_lower(text::trim(body.at("organ").get<std::string>()));
    const auto prefix = body.value("prefix", std::string());

    std::vector<radiomics::OrganFeatureSet> features;
    std::optional<radiomics::LateralityRatio> ratio;
    {
      std::lock_guard lock(study->mu);
      for (const auto& [name, f] : study->features) {
        const radiomics::OrganFeatureSet one[1] = {f};
        if (name == organ || promptgen::infer_organ(one) == organ) features.push_back(f);
      }
      if (auto it = study->ratios.find(organ); it != study->ratios.end()) ratio = it->second;
    }
    if (features.empty()) throw Error(Errc::NotAnalyzed, "study " + study->id + " has no features for " + organ);
    const auto payload = promptgen::render_input_payload(features, ratio, organ);

    std::string id;
    do {
      id = completion::new_id("se-");
    } while (fs::exists(session_dir(id)));
    const auto initial = std::string(text::trim(prefix));
    write_durable(session_dir(id) / "session.json", json{{"session_id", id},
                                                         {"study_id", study->id},
                                                         {"organ", organ},
                                                         {"feature_payload", payload},
                                                         {"initial_text", initial}}
                                                        .dump(2));
    auto entry = open_session(id, study->id, organ, payload, initial, {}, false);
    {
      std::lock_guard lock(sessions_mu);
      sessions[id] = entry;
    }
    send_json(res, 201, {{"session_id", id}, {"feature_payload", payload}, {"accepted_text", initial}});
  }

  static json suggestion_json(const completion::Suggestion& s) {
    json j = {{"suggestion_id", s.id()},
              {"status", std::string(completion::status_name(s.status()))},
              {"text", s.text()},
              {"token_count", s.token_count()},
              {"late_tokens", s.late_tokens()}};
    if (auto tps = s.tokens_per_sec()) j["tokens_per_sec"] = *tps;
    if (auto e = s.error()) j["error"] = std::string(e->name());
    return j;
  }

  void get_session(const httplib::Request& req, httplib::Response& res) {
    auto entry = find_session(req.matches[1]);
    const auto& s = *entry->session;
    const auto sug = s.current_suggestion();
    send_json(res, 200,
              {{"session_id", s.id()},
               {"study_id", entry->study_id},
               {"organ", s.organ()},
               {"feature_payload", s.feature_payload()},
               {"accepted_text", s.accepted_text()},
               {"event_count", s.event_count()},
               {"last_seq", entry->log->last_seq()},
               {"suggestion", sug ? suggestion_json(*sug) : json(nullptr)}});
  }

  void suggestion(const httplib::Request& req, httplib::Response& res) {
    auto entry = find_session(req.matches[1]);
    completion::BackendParams params;
    params.max_tokens = config.max_tokens_default;
    if (req.has_param("max_tokens")) {
      const auto v = req.get_param_value("max_tokens");
      int n = 0;
      const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
      if (ec != std::errc() || ptr != v.data() + v.size() || n < 1)
        throw Error(Errc::InvalidArgument, "max_tokens must be a positive integer");
      params.max_tokens = n;
    }
    auto sug = entry->session->propose(backend, params);

    auto cancel = [entry, sug] {
      if (sug->status() != SuggestionStatus::Streaming) return;
      try {
        if (entry->session->current_suggestion() == sug) entry->session->cancel();
      } catch (const Error&) {
        // finished between the check and the cancel
      }
    };

    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider(
        "text/event-stream",
        [sug, cancel](std::size_t, httplib::DataSink& sink) {
          std::size_t seen = 0;
          auto write = [&](const std::string& chunk) { return sink.write(chunk.data(), chunk.size()); };
          for (;;) {
            const auto snap = sug->wait_beyond(seen, std::chrono::milliseconds(50));
            for (const auto& t : snap.new_tokens) {
              if (!write(sse("token", {{"text", t}, {"index", seen}}))) {
                cancel();
                return false;
              }
              ++seen;
            }
            if (snap.status != SuggestionStatus::Streaming && snap.new_tokens.empty()) break;
            if (snap.new_tokens.empty() && !sink.is_writable()) {
              cancel();
              return false;
            }
          }
          const auto status = sug->status();
          bool ok = true;
          if (status == SuggestionStatus::Failed) {
            const auto e = sug->error();
            ok = write(sse("error", {{"suggestion_id", sug->id()},
                                     {"error", e ? std::string(e->name()) : "Failed"},
                                     {"detail", e ? e->detail() : ""}}));
          } else if (status == SuggestionStatus::Cancelled) {
            ok = write(sse("error", {{"suggestion_id", sug->id()}, {"error", "Cancelled"}, {"detail", ""}}));
          } else {
            const double elapsed = sug->elapsed_seconds();
            ok = write(sse("done", {{"suggestion_id", sug->id()},
                                    {"token_count", sug->token_count()},
                                    {"elapsed_ms", elapsed * 1000.0},
                                    {"tokens_per_sec", sug->tokens_per_sec().value_or(0.0)}}));
          }
          if (ok) sink.done();
          return ok;
        },
        [cancel](bool success) {
          if (!success) cancel();
        });
  }

  void accept(const httplib::Request& req, httplib::Response& res) {
    auto entry = find_session(req.matches[1]);
    const auto body = parse_body(req);
    const auto mode = completion::parse_accept_mode(body.value("mode", std::string("full")));
    const auto text = entry->session->accept(mode);
    send_json(res, 200, {{"accepted_text", text}});
  }

  void reject(const httplib::Request& req, httplib::Response& res) {
    auto entry = find_session(req.matches[1]);
    entry->session->reject();
    send_json(res, 200, {{"accepted_text", entry->session->accepted_text()}});
  }

  void edit(const httplib::Request& req, httplib::Response& res) {
    auto entry = find_session(req.matches[1]);
    const auto body = parse_body(req);
    if (!body.contains("text") || !body["text"].is_string())
      throw Error(Errc::InvalidArgument, "edit needs a string 'text'");
    entry->session->edit(body["text"].get<std::string>());
    send_json(res, 200, {{"accepted_text", entry->session->accepted_text()}});
  }

  void cancel(const httplib::Request& req, httplib::Response& res) {
    auto entry = find_session(req.matches[1]);
    entry->session->cancel();
    send_json(res, 200, {{"accepted_text", entry->session->accepted_text()}});
  }

  void report(const httplib::Request& req, httplib::Response& res) {
    auto entry = find_session(req.matches[1]);
    send_json(res, 200,
              {{"session_id", entry->session->id()},
               {"accepted_text", entry->session->accepted_text()},
               {"event_count", entry->session->event_count()}});
  }

  void routes() {
    constexpr const char* kId = "([A-Za-z0-9_-]+)";
    const std::string id = kId;
    server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"status", "ok"}});
    });
    server.Post("/studies", guard([this](auto& q, auto& r) { post_study(q, r); }));
    server.Post("/studies/" + id + "/analyze", guard([this](auto& q, auto& r) { analyze(q, r); }));
    server.Get("/studies/" + id + "/slices/([^/]+)/([^/]+)", guard([this](auto& q, auto& r) { slice(q, r); }));
    server.Post("/sessions", guard([this](auto& q, auto& r) { post_session(q, r); }));
    server.Get("/sessions/" + id, guard([this](auto& q, auto& r) { get_session(q, r); }));
    server.Get("/sessions/" + id + "/suggestion", guard([this](auto& q, auto& r) { suggestion(q, r); }));
    server.Post("/sessions/" + id + "/accept", guard([this](auto& q, auto& r) { accept(q, r); }));
    server.Post("/sessions/" + id + "/reject", guard([this](auto& q, auto& r) { reject(q, r); }));
    server.Post("/sessions/" + id + "/edit", guard([this](auto& q, auto& r) { edit(q, r); }));
    server.Post("/sessions/" + id + "/cancel", guard([this](auto& q, auto& r) { cancel(q, r); }));
    server.Get("/sessions/" + id + "/report", guard([this](auto& q, auto& r) { report(q, r); }));
  }
};

Service::Service(ServiceConfig config, std::shared_ptr<completion::Backend> backend)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(backend))) {}

Service::~Service() { stop(); }

int Service::bind() {
  impl_->server.set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  if (impl_->config.port == 0) {
    impl_->port = impl_->server.bind_to_any_port(impl_->config.host);
  } else if (impl_->server.bind_to_port(impl_->config.host, impl_->config.port)) {
    impl_->port = impl_->config.port;
  } else {
    impl_->port = -1;
  }
  if (impl_->port < 0)
    throw Error(Errc::IoError, "cannot listen on " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  return impl_->port;
}

void Service::run() { impl_->server.listen_after_bind(); }

int Service::start() {
  const int p = bind();
  impl_->thread = std::thread([this] { run(); });
  impl_->server.wait_until_ready();
  return p;
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int Service::port() const { return impl_->port; }

}  // namespace reportpilot::service
