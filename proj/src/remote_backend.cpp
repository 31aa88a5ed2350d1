#include "reportpilot/remote_backend.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <optional>

#include "httplib.h"
#include "json.hpp"

namespace reportpilot::completion {

using json = nlohmann::json;

RemoteBackend::RemoteBackend(RemoteConfig config) : config_(std::move(config)) {
  const auto& url = config_.base_url;
  const auto scheme_end = url.find("://");
  if (url.empty() || scheme_end == std::string::npos || url.substr(0, scheme_end) != "http")
    throw Error(Errc::InvalidConfig, "base_url must look like http://host:port (plain HTTP only), got '" + url + "'");
  const auto path_start = url.find('/', scheme_end + 3);
  origin_ = url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  path_ = prefix + "/v1/chat/completions";
  if (config_.model.empty()) throw Error(Errc::InvalidConfig, "remote backend needs a model name");
  if (!(config_.timeout_s > 0)) throw Error(Errc::InvalidConfig, "timeout_s must be > 0");

  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (!key || !*key)
      throw Error(Errc::InvalidConfig, "credential variable " + config_.api_key_env + " is not set");
    api_key_ = key;
  }
}

std::string RemoteBackend::request_body(std::string_view prompt, const BackendParams& params) const {
  json body = {{"model", config_.model},
               {"stream", true},
               {"max_tokens", params.max_tokens},
               {"temperature", params.temperature},
               {"messages",
                json::array({{{"role", "system"}, {"content", config_.system_instruction}},
                             {{"role", "user"}, {"content", std::string(prompt)}}})}};
  if (!params.stop_sequences.empty()) body["stop"] = params.stop_sequences;
  return body.dump();
}

void RemoteBackend::generate(std::string_view prompt, const BackendParams& params, const TokenSink& sink,
                             std::stop_token stop) {
  httplib::Client client(origin_);
  const auto secs = static_cast<time_t>(std::floor(config_.timeout_s));
  const auto usecs = static_cast<time_t>((config_.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  httplib::Request req;
  req.method = "POST";
  req.path = path_;
  req.headers = {{"Accept", "text/event-stream"}};
  if (!api_key_.empty()) req.headers.emplace("Authorization", "Bearer " + api_key_);
  req.body = request_body(prompt, params);
  req.set_header("Content-Type", "application/json");

  int status = 0;
  std::string error_body;
  ChatStreamParser parser;
  std::optional<Error> failure;
  int emitted = 0;
  bool finished = false;  // [DONE], max_tokens or cancellation

  req.response_handler = [&](const httplib::Response& res) {
    status = res.status;
    return true;
  };
  req.content_receiver = [&](const char* data, std::size_t n, std::uint64_t, std::uint64_t) {
    if (status < 200 || status >= 300) {
      if (error_body.size() < 4096) error_body.append(data, std::min(n, 4096 - error_body.size()));
      return true;
    }
    std::vector<std::string> tokens;
    try {
      tokens = parser.feed(std::string_view(data, n));
    } catch (const Error& e) {
      failure = e;
      return false;
    }
    for (const auto& t : tokens) {
      if (stop.stop_requested() || emitted >= params.max_tokens) {
        finished = true;
        return false;
      }
      sink(t);
      ++emitted;
    }
    if (parser.done() || stop.stop_requested() || emitted >= params.max_tokens) {
      finished = true;
      return false;
    }
    return true;
  };

  const auto started = std::chrono::steady_clock::now();
  httplib::Response res;
  httplib::Error err = httplib::Error::Success;
  client.send(req, res, err);

  if (failure) throw *failure;
  if (finished) return;
  if (status != 0 && (status < 200 || status >= 300)) {
    throw Error(Errc::BackendUnavailable,
                "HTTP " + std::to_string(status) + (error_body.empty() ? "" : ": " + error_body));
  }
  if (err == httplib::Error::Success) {
    if (stop.stop_requested()) return;
    throw Error(Errc::StreamCorrupt, "stream ended without [DONE]");
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (err == httplib::Error::ConnectionTimeout ||
      (err == httplib::Error::Read && elapsed >= 0.9 * config_.timeout_s))
    throw Error(Errc::BackendTimeout, "no response within " + std::to_string(config_.timeout_s) + " s");
  throw Error(Errc::BackendUnavailable, httplib::to_string(err));
}

std::vector<std::string> ChatStreamParser::feed(std::string_view bytes) {
  std::vector<std::string> out;
  buffer_.append(bytes);
  std::size_t pos;
  while (!done_ && (pos = buffer_.find('\n')) != std::string::npos) {
    std::string l = buffer_.substr(0, pos);
    buffer_.erase(0, pos + 1);
    if (!l.empty() && l.back() == '\r') l.pop_back();
    line(l, out);
  }
  return out;
}

void ChatStreamParser::line(std::string_view l, std::vector<std::string>& out) {
  if (l.rfind("data:", 0) != 0) return;  // blank lines, comments, event:/id: fields
  l.remove_prefix(5);
  if (!l.empty() && l.front() == ' ') l.remove_prefix(1);
  if (l == "[DONE]") {
    done_ = true;
    return;
  }
  json chunk;
  try {
    chunk = json::parse(l);
  } catch (const json::exception& e) {
    throw Error(Errc::StreamCorrupt, std::string("invalid chunk: ") + e.what());
  }
  if (!chunk.is_object()) throw Error(Errc::StreamCorrupt, "chunk is not an object");
  if (chunk.contains("error")) throw Error(Errc::BackendUnavailable, chunk["error"].dump());
  if (!chunk.contains("choices")) return;
  const auto& choices = chunk["choices"];
  if (!choices.is_array()) throw Error(Errc::StreamCorrupt, "choices is not an array");
  for (const auto& choice : choices) {
    if (!choice.is_object()) throw Error(Errc::StreamCorrupt, "choice is not an object");
    const auto delta = choice.find("delta");
    if (delta == choice.end()) continue;
    if (!delta->is_object()) throw Error(Errc::StreamCorrupt, "delta is not an object");
    const auto content = delta->find("content");
    if (content == delta->end() || content->is_null()) continue;
    if (!content->is_string()) throw Error(Errc::StreamCorrupt, "delta content is not a string");
    auto s = content->get<std::string>();
    if (!s.empty()) out.push_back(std::move(s));
  }
}

}  // namespace reportpilot::completion
