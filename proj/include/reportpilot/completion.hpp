#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stop_token>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "reportpilot/error.hpp"

namespace reportpilot::completion {

struct BackendParams {
  int max_tokens = 64;
  double temperature = 0.0;
  std::vector<std::string> stop_sequences;
};

using TokenSink = std::function<void(std::string_view token)>;

// A streaming text generator. Implementations yield zero or more tokens to
// `sink`, check `stop` before every token, emit at most
// params.max_tokens tokens and return at end of stream. Failures are thrown
// as Error{BackendUnavailable, BackendTimeout, StreamCorrupt}.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string name() const = 0;
  virtual void generate(std::string_view prompt, const BackendParams& params, const TokenSink& sink,
                        std::stop_token stop) = 0;
};

// Runs a backend to completion and returns its tokens, applying
// max_tokens and stop sequences the same way sessions do.
std::vector<std::string> generate_all(Backend& backend, std::string_view prompt,
                                      const BackendParams& params);

// Splits text into whitespace-delimited tokens where every token after the
// first carries one leading space, so concatenation restores the words.
std::vector<std::string> word_tokens(std::string_view text);

enum class SuggestionStatus {
  Streaming,
  Complete,
  Accepted,
  PartiallyAccepted,
  Rejected,
  Cancelled,
  Failed,  // backend error while streaming
};

std::string_view status_name(SuggestionStatus s);

using Clock = std::chrono::system_clock;

class CompletionSession;

// One streamed suggestion. Tokens are appended by the backend worker while
// readers take consistent snapshots.
class Suggestion {
 public:
  Suggestion(std::string id, std::string prompt, BackendParams params);

  const std::string& id() const noexcept { return id_; }
  const std::string& prompt() const noexcept { return prompt_; }

  std::vector<std::string> tokens() const;
  std::string text() const;
  std::size_t token_count() const;
  SuggestionStatus status() const;
  Clock::time_point started_at() const;
  std::optional<Clock::time_point> finished_at() const;
  double elapsed_seconds() const;
  // token count / elapsed seconds; set once streaming has finished.
  std::optional<double> tokens_per_sec() const;
  std::optional<Error> error() const;
  // Tokens the backend produced after cancellation (dropped, never shown).
  std::size_t late_tokens() const;

  struct Snapshot {
    std::vector<std::string> new_tokens;
    SuggestionStatus status;
  };
  // Blocks until more than `seen` tokens exist, streaming ends, or timeout.
  Snapshot wait_beyond(std::size_t seen, std::chrono::milliseconds timeout) const;
  bool wait_finished(std::chrono::milliseconds timeout) const;

 private:
  friend class CompletionSession;

  void append(std::string_view token);
  void finish();
  void fail(const Error& e);
  bool mark_cancelled();
  void set_status(SuggestionStatus s);
  void complete_with(std::vector<std::string> tokens, double elapsed_s, std::optional<double> tps);
  std::stop_source& stop_source() { return stop_; }

  const std::string id_;
  const std::string prompt_;
  const BackendParams params_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::vector<std::string> tokens_;
  std::string text_;
  SuggestionStatus status_ = SuggestionStatus::Streaming;
  Clock::time_point started_;
  std::chrono::steady_clock::time_point started_steady_;
  std::optional<Clock::time_point> finished_;
  double elapsed_s_ = 0.0;
  std::optional<double> tps_;
  std::optional<Error> error_;
  std::size_t late_tokens_ = 0;
  std::stop_source stop_;
};

enum class FeedbackKind { Proposed, Accepted, PartialAccept, Rejected, Edited, Cancelled };

std::string_view feedback_kind_name(FeedbackKind k);
FeedbackKind parse_feedback_kind(std::string_view name);

struct FeedbackEvent {
  FeedbackKind kind;
  std::int64_t timestamp_us = 0;  // microseconds since the Unix epoch
  std::string payload;
};

enum class AcceptMode { Full, FirstWord };

AcceptMode parse_accept_mode(std::string_view name);

// Live editing state for one organ section. All mutating operations on one
// session are serialized; the event log is the source of truth for
// accepted_text (see replay()).
class CompletionSession {
 public:
  // Called with each event before the in-memory state changes; throwing
  // aborts the operation.
  using EventSink = std::function<void(const FeedbackEvent&)>;

  CompletionSession(std::string id, std::string organ, std::string feature_payload,
                    std::string initial_text = {}, EventSink sink = {});

  // Rebuilds a session from a persisted log without re-emitting events.
  static std::unique_ptr<CompletionSession> restore(std::string id, std::string organ,
                                                    std::string feature_payload,
                                                    std::string initial_text,
                                                    std::vector<FeedbackEvent> events,
                                                    EventSink sink = {});

  ~CompletionSession();
  CompletionSession(const CompletionSession&) = delete;
  CompletionSession& operator=(const CompletionSession&) = delete;

  const std::string& id() const noexcept { return id_; }
  const std::string& organ() const noexcept { return organ_; }
  const std::string& feature_payload() const noexcept { return feature_payload_; }
  const std::string& initial_text() const noexcept { return initial_text_; }

  std::string accepted_text() const;
  std::vector<FeedbackEvent> event_log() const;
  std::size_t event_count() const;
  std::shared_ptr<Suggestion> current_suggestion() const;

  // feature_payload + ", " + accepted_text, omitting whichever part is empty.
  std::string build_prompt() const;

  // Throws SuggestionInFlight, EmptyPrompt.
  std::shared_ptr<Suggestion> propose(std::shared_ptr<Backend> backend, const BackendParams& params);
  // Throws NoSuggestion, NotComplete. Returns the new accepted_text.
  std::string accept(AcceptMode mode);
  // Throws NoSuggestion, NotComplete.
  void reject();
  // Throws SuggestionInFlight.
  void edit(std::string new_text);
  // Throws NoSuggestion, NotComplete (suggestion already finished).
  void cancel();

  static std::string replay(std::string_view initial_text, std::span<const FeedbackEvent> events);

 private:
  FeedbackEvent make_event(FeedbackKind kind, std::string payload);
  void record(FeedbackEvent e);
  void reap_workers();

  const std::string id_;
  const std::string organ_;
  const std::string feature_payload_;
  const std::string initial_text_;
  EventSink sink_;

  mutable std::mutex mu_;
  std::string accepted_;
  std::shared_ptr<Suggestion> current_;
  std::vector<FeedbackEvent> log_;
  std::int64_t last_ts_ = 0;
  struct Worker {
    std::shared_ptr<Suggestion> suggestion;
    std::shared_ptr<std::atomic<bool>> done;
    std::jthread thread;
  };
  std::vector<Worker> workers_;
};

std::string new_id(std::string_view prefix);

}  // namespace reportpilot::completion
