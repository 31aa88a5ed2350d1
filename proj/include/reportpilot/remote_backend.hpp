#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "reportpilot/completion.hpp"

namespace reportpilot::completion {

inline constexpr std::string_view kDefaultSystemInstruction =
    "You are an assistant that completes radiology reports. Continue the report text using the "
    "quantitative imaging findings given at the start of the prompt. Reply with report text only.";

struct RemoteConfig {
  std::string base_url;  // e.g. "http://127.0.0.1:8000"; requests go to {base}/v1/chat/completions
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";  // empty: send no credential
  double timeout_s = 30.0;
  std::string system_instruction = std::string(kDefaultSystemInstruction);
};

// Streaming client for the chat-completions event-stream wire format.
// Construction throws InvalidConfig when the URL is unusable or the
// credential variable is unset.
class RemoteBackend final : public Backend {
 public:
  explicit RemoteBackend(RemoteConfig config);

  std::string name() const override { return "remote"; }
  void generate(std::string_view prompt, const BackendParams& params, const TokenSink& sink,
                std::stop_token stop) override;

  // The JSON request body for a prompt.
  std::string request_body(std::string_view prompt, const BackendParams& params) const;

  const RemoteConfig& config() const noexcept { return config_; }

 private:
  RemoteConfig config_;
  std::string api_key_;
  std::string origin_;  // scheme://host:port
  std::string path_;    // path prefix + /v1/chat/completions
};

// Incremental parser for `data:` framed event-stream chunks. Feed raw
// bytes; complete lines are decoded into content deltas.
class ChatStreamParser {
 public:
  // Throws StreamCorrupt on malformed JSON chunks and BackendUnavailable on
  // an in-stream error object.
  std::vector<std::string> feed(std::string_view bytes);
  bool done() const noexcept { return done_; }

 private:
  void line(std::string_view l, std::vector<std::string>& out);

  std::string buffer_;
  bool done_ = false;
};

}  // namespace reportpilot::completion
