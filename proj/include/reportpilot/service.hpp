#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "reportpilot/completion.hpp"
#include "reportpilot/imaging.hpp"
#include "reportpilot/remote_backend.hpp"

namespace reportpilot::service {

struct BackendConfig {
  std::string kind = "rule";  // "rule" | "remote"
  std::filesystem::path rules_path;  // empty: built-in rules
  int token_delay_ms = 0;            // rule backend pacing
  completion::RemoteConfig remote;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path data_dir = "data";
  BackendConfig backend;
  int max_tokens_default = 64;

  // Relative paths resolve against `base_dir`. Throws InvalidConfig.
  static ServiceConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static ServiceConfig load(const std::filesystem::path& path);
};

// Throws InvalidConfig (unknown kind, unreadable rules, missing credential).
std::shared_ptr<completion::Backend> make_backend(const BackendConfig& config);

// HTTP status for a module error code.
int http_status(Errc code);

// [[label, count], ...] runs in raster order.
nlohmann::json rle_encode(std::span<const std::uint32_t> labels);
// Throws ParseError on malformed runs.
std::vector<std::uint32_t> rle_decode(const nlohmann::json& runs);

// RGB hint per organ; any kidney variant is blue.
std::array<int, 3> palette_color(std::string_view organ);

// Append-only JSONL log of one session's events. Every append is flushed
// to disk before it returns.
class EventLog {
 public:
  EventLog(std::filesystem::path path, std::string session_id);
  ~EventLog();
  EventLog(const EventLog&) = delete;
  EventLog& operator=(const EventLog&) = delete;

  // Returns the record's seq (1-based, no gaps). Throws IoError.
  std::int64_t append(const completion::FeedbackEvent& e);
  std::int64_t last_seq() const;

  struct Record {
    std::int64_t seq;
    completion::FeedbackEvent event;
  };
  // Reads records in order; a torn final line is ignored. Throws ParseError on
  // a seq gap or a corrupt record before the last line.
  static std::vector<Record> read(const std::filesystem::path& path);

 private:
  std::filesystem::path path_;
  std::string session_id_;
  int fd_ = -1;
  std::int64_t seq_ = 0;
  mutable std::mutex mu_;
};

class Service {
 public:
  explicit Service(ServiceConfig config, std::shared_ptr<completion::Backend> backend = nullptr);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds the listening socket and returns the port. Throws IoError when the
  // address is unavailable.
  int bind();
  // Serves on the bound socket until stop().
  void run();
  // bind() plus run() on a background thread.
  int start();
  void stop();
  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace reportpilot::service
