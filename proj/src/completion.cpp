#include "reportpilot/completion.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

#include "reportpilot/text.hpp"

namespace reportpilot::completion {

namespace {

std::int64_t now_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(Clock::now().time_since_epoch()).count();
}

// Applies max_tokens and stop sequences to a growing token list. Returns
// false once generation should stop.
bool push_limited(std::vector<std::string>& tokens, std::string& text, std::string_view token,
                  const BackendParams& params) {
  if (static_cast<int>(tokens.size()) >= params.max_tokens) return false;
  const std::size_t before = text.size();
  text.append(token);
  std::size_t cut = std::string::npos;
  for (const auto& stop : params.stop_sequences) {
    if (stop.empty()) continue;
    // Only matches that end inside the new token are new.
    const std::size_t from = before >= stop.size() ? before - stop.size() + 1 : 0;
    const auto p = text.find(stop, from);
    if (p != std::string::npos) cut = std::min(cut, p);
  }
  if (cut != std::string::npos) {
    if (cut > before) tokens.push_back(text.substr(before, cut - before));
    text.resize(std::max(cut, before));
    return false;
  }
  tokens.emplace_back(token);
  return static_cast<int>(tokens.size()) < params.max_tokens;
}

}  // namespace

std::string new_id(std::string_view prefix) {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
  return std::string(prefix) + buf;
}

std::vector<std::string> word_tokens(std::string_view text) {
  auto words = text::split_ws(text);
  for (std::size_t i = 1; i < words.size(); ++i) words[i] = " " + words[i];
  return words;
}

std::vector<std::string> generate_all(Backend& backend, std::string_view prompt,
                                      const BackendParams& params) {
  std::vector<std::string> tokens;
  std::string text;
  std::stop_source stop;
  backend.generate(
      prompt, params,
      [&](std::string_view token) {
        if (stop.stop_requested()) return;
        if (!push_limited(tokens, text, token, params)) stop.request_stop();
      },
      stop.get_token());
  return tokens;
}

std::string_view status_name(SuggestionStatus s) {
  switch (s) {
    case SuggestionStatus::Streaming: return "Streaming";
    case SuggestionStatus::Complete: return "Complete";
    case SuggestionStatus::Accepted: return "Accepted";
    case SuggestionStatus::PartiallyAccepted: return "PartiallyAccepted";
    case SuggestionStatus::Rejected: return "Rejected";
    case SuggestionStatus::Cancelled: return "Cancelled";
    case SuggestionStatus::Failed: return "Failed";
  }
  return "Unknown";
}

std::string_view feedback_kind_name(FeedbackKind k) {
  switch (k) {
    case FeedbackKind::Proposed: return "Proposed";
    case FeedbackKind::Accepted: return "Accepted";
    case FeedbackKind::PartialAccept: return "PartialAccept";
    case FeedbackKind::Rejected: return "Rejected";
    case FeedbackKind::Edited: return "Edited";
    case FeedbackKind::Cancelled: return "Cancelled";
  }
  return "Unknown";
}

FeedbackKind parse_feedback_kind(std::string_view name) {
  for (auto k : {FeedbackKind::Proposed, FeedbackKind::Accepted, FeedbackKind::PartialAccept,
                 FeedbackKind::Rejected, FeedbackKind::Edited, FeedbackKind::Cancelled}) {
    if (feedback_kind_name(k) == name) return k;
  }
  throw Error(Errc::ParseError, "unknown feedback kind '" + std::string(name) + "'");
}

AcceptMode parse_accept_mode(std::string_view name) {
  if (name == "full" || name == "Full") return AcceptMode::Full;
  if (name == "first_word" || name == "FirstWord" || name == "word") return AcceptMode::FirstWord;
  throw Error(Errc::InvalidArgument, "unknown accept mode '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Suggestion

Suggestion::Suggestion(std::string id, std::string prompt, BackendParams params)
    : id_(std::move(id)),
      prompt_(std::move(prompt)),
      params_(std::move(params)),
      started_(Clock::now()),
      started_steady_(std::chrono::steady_clock::now()) {}

std::vector<std::string> Suggestion::tokens() const {
  std::lock_guard lock(mu_);
  return tokens_;
}

std::string Suggestion::text() const {
  std::lock_guard lock(mu_);
  return text_;
}

std::size_t Suggestion::token_count() const {
  std::lock_guard lock(mu_);
  return tokens_.size();
}

SuggestionStatus Suggestion::status() const {
  std::lock_guard lock(mu_);
  return status_;
}

Clock::time_point Suggestion::started_at() const { return started_; }

std::optional<Clock::time_point> Suggestion::finished_at() const {
  std::lock_guard lock(mu_);
  return finished_;
}

double Suggestion::elapsed_seconds() const {
  std::lock_guard lock(mu_);
  if (finished_) return elapsed_s_;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - started_steady_).count();
}

std::optional<double> Suggestion::tokens_per_sec() const {
  std::lock_guard lock(mu_);
  return tps_;
}

std::optional<Error> Suggestion::error() const {
  std::lock_guard lock(mu_);
  return error_;
}

std::size_t Suggestion::late_tokens() const {
  std::lock_guard lock(mu_);
  return late_tokens_;
}

Suggestion::Snapshot Suggestion::wait_beyond(std::size_t seen, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout,
               [&] { return tokens_.size() > seen || status_ != SuggestionStatus::Streaming; });
  Snapshot snap{{}, status_};
  if (tokens_.size() > seen) snap.new_tokens.assign(tokens_.begin() + static_cast<std::ptrdiff_t>(seen), tokens_.end());
  return snap;
}

bool Suggestion::wait_finished(std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return cv_.wait_for(lock, timeout, [&] { return status_ != SuggestionStatus::Streaming; });
}

void Suggestion::append(std::string_view token) {
  {
    std::lock_guard lock(mu_);
    if (status_ == SuggestionStatus::Cancelled) {
      ++late_tokens_;
      return;
    }
    if (status_ != SuggestionStatus::Streaming) return;
    if (!push_limited(tokens_, text_, token, params_)) stop_.request_stop();
  }
  cv_.notify_all();
}

namespace {
void stamp_finish(std::optional<Clock::time_point>& finished, double& elapsed_s,
                  std::chrono::steady_clock::time_point started) {
  finished = Clock::now();
  elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  elapsed_s = std::max(elapsed_s, 1e-9);
}
}  // namespace

void Suggestion::finish() {
  {
    std::lock_guard lock(mu_);
    if (status_ != SuggestionStatus::Streaming) return;
    stamp_finish(finished_, elapsed_s_, started_steady_);
    tps_ = static_cast<double>(tokens_.size()) / elapsed_s_;
    status_ = SuggestionStatus::Complete;
  }
  cv_.notify_all();
}

void Suggestion::fail(const Error& e) {
  {
    std::lock_guard lock(mu_);
    if (status_ != SuggestionStatus::Streaming) return;
    stamp_finish(finished_, elapsed_s_, started_steady_);
    tps_ = static_cast<double>(tokens_.size()) / elapsed_s_;
    error_ = e;
    status_ = SuggestionStatus::Failed;
  }
  cv_.notify_all();
}

bool Suggestion::mark_cancelled() {
  {
    std::lock_guard lock(mu_);
    if (status_ != SuggestionStatus::Streaming) return false;
    stamp_finish(finished_, elapsed_s_, started_steady_);
    tps_ = static_cast<double>(tokens_.size()) / elapsed_s_;
    status_ = SuggestionStatus::Cancelled;
  }
  stop_.request_stop();
  cv_.notify_all();
  return true;
}

void Suggestion::set_status(SuggestionStatus s) {
  {
    std::lock_guard lock(mu_);
    status_ = s;
  }
  cv_.notify_all();
}

void Suggestion::complete_with(std::vector<std::string> tokens, double elapsed_s,
                               std::optional<double> tps) {
  std::lock_guard lock(mu_);
  tokens_ = std::move(tokens);
  text_.clear();
  for (const auto& t : tokens_) text_ += t;
  finished_ = Clock::now();
  elapsed_s_ = elapsed_s;
  tps_ = tps;
  status_ = SuggestionStatus::Complete;
}

// ---------------------------------------------------------------------------
// CompletionSession

CompletionSession::CompletionSession(std::string id, std::string organ, std::string feature_payload,
                                     std::string initial_text, EventSink sink)
    : id_(std::move(id)),
      organ_(std::move(organ)),
      feature_payload_(std::move(feature_payload)),
      initial_text_(std::move(initial_text)),
      sink_(std::move(sink)),
      accepted_(initial_text_) {}

std::unique_ptr<CompletionSession> CompletionSession::restore(std::string id, std::string organ,
                                                              std::string feature_payload,
                                                              std::string initial_text,
                                                              std::vector<FeedbackEvent> events,
                                                              EventSink sink) {
  auto s = std::make_unique<CompletionSession>(std::move(id), std::move(organ),
                                               std::move(feature_payload), std::move(initial_text),
                                               std::move(sink));
  s->accepted_ = replay(s->initial_text_, events);
  for (const auto& e : events) s->last_ts_ = std::max(s->last_ts_, e.timestamp_us);
  s->log_ = std::move(events);
  return s;
}

CompletionSession::~CompletionSession() {
  for (auto& w : workers_) w.suggestion->stop_source().request_stop();
  workers_.clear();  // joins
}

std::string CompletionSession::accepted_text() const {
  std::lock_guard lock(mu_);
  return accepted_;
}

std::vector<FeedbackEvent> CompletionSession::event_log() const {
  std::lock_guard lock(mu_);
  return log_;
}

std::size_t CompletionSession::event_count() const {
  std::lock_guard lock(mu_);
  return log_.size();
}

std::shared_ptr<Suggestion> CompletionSession::current_suggestion() const {
  std::lock_guard lock(mu_);
  return current_;
}

std::string CompletionSession::build_prompt() const {
  std::lock_guard lock(mu_);
  if (feature_payload_.empty()) return accepted_;
  if (accepted_.empty()) return feature_payload_;
  return feature_payload_ + ", " + accepted_;
}

FeedbackEvent CompletionSession::make_event(FeedbackKind kind, std::string payload) {
  std::int64_t ts = std::max(now_us(), last_ts_ + 1);
  return {kind, ts, std::move(payload)};
}

void CompletionSession::record(FeedbackEvent e) {
  if (sink_) sink_(e);
  last_ts_ = e.timestamp_us;
  log_.push_back(std::move(e));
}

void CompletionSession::reap_workers() {
  std::erase_if(workers_, [](const Worker& w) { return w.done->load(); });
}

std::shared_ptr<Suggestion> CompletionSession::propose(std::shared_ptr<Backend> backend,
                                                       const BackendParams& params) {
  if (params.max_tokens < 1) throw Error(Errc::InvalidArgument, "max_tokens must be >= 1");
  std::lock_guard lock(mu_);
  if (current_ && current_->status() == SuggestionStatus::Streaming)
    throw Error(Errc::SuggestionInFlight);

  std::string prompt;
  if (feature_payload_.empty()) prompt = accepted_;
  else if (accepted_.empty()) prompt = feature_payload_;
  else prompt = feature_payload_ + ", " + accepted_;
  if (text::trim(prompt).empty()) throw Error(Errc::EmptyPrompt);

  reap_workers();
  record(make_event(FeedbackKind::Proposed, prompt));

  auto suggestion = std::make_shared<Suggestion>(new_id("sug-"), prompt, params);
  auto done = std::make_shared<std::atomic<bool>>(false);
  std::jthread thread([suggestion, backend, done, params](std::stop_token) {
    try {
      backend->generate(
          suggestion->prompt(), params, [&](std::string_view token) { suggestion->append(token); },
          suggestion->stop_source().get_token());
      suggestion->finish();
    } catch (const Error& e) {
      suggestion->fail(e);
    } catch (const std::exception& e) {
      suggestion->fail(Error(Errc::StreamCorrupt, e.what()));
    }
    done->store(true);
  });
  workers_.push_back({suggestion, done, std::move(thread)});
  current_ = suggestion;
  return suggestion;
}

std::string CompletionSession::accept(AcceptMode mode) {
  std::lock_guard lock(mu_);
  if (!current_) throw Error(Errc::NoSuggestion);
  if (current_->status() != SuggestionStatus::Complete) throw Error(Errc::NotComplete);

  const std::string text = current_->text();
  if (mode == AcceptMode::Full) {
    record(make_event(FeedbackKind::Accepted, text));
    accepted_ = text::append_with_space(accepted_, text);
    current_->set_status(SuggestionStatus::Accepted);
    current_.reset();
    return accepted_;
  }

  const auto body = text::trim(text);
  std::size_t split = 0;
  while (split < body.size() && !text::is_space(body[split])) ++split;
  const std::string first(body.substr(0, split));
  const std::string rest(text::trim(body.substr(split)));

  record(make_event(FeedbackKind::PartialAccept, first));
  accepted_ = text::append_with_space(accepted_, first);
  current_->set_status(SuggestionStatus::PartiallyAccepted);
  if (rest.empty()) {
    current_.reset();
  } else {
    auto remainder = std::make_shared<Suggestion>(new_id("sug-"), current_->prompt(), current_->params_);
    remainder->complete_with(word_tokens(rest), current_->elapsed_seconds(), current_->tokens_per_sec());
    current_ = remainder;
  }
  return accepted_;
}

void CompletionSession::reject() {
  std::lock_guard lock(mu_);
  if (!current_) throw Error(Errc::NoSuggestion);
  if (current_->status() != SuggestionStatus::Complete) throw Error(Errc::NotComplete);
  record(make_event(FeedbackKind::Rejected, current_->text()));
  current_->set_status(SuggestionStatus::Rejected);
  current_.reset();
}

void CompletionSession::edit(std::string new_text) {
  std::lock_guard lock(mu_);
  if (current_ && current_->status() == SuggestionStatus::Streaming)
    throw Error(Errc::SuggestionInFlight);
  record(make_event(FeedbackKind::Edited, new_text));
  accepted_ = std::move(new_text);
}

void CompletionSession::cancel() {
  std::lock_guard lock(mu_);
  if (!current_) throw Error(Errc::NoSuggestion);
  if (!current_->mark_cancelled()) throw Error(Errc::NotComplete, "suggestion is no longer streaming");
  auto cancelled = std::move(current_);
  record(make_event(FeedbackKind::Cancelled, cancelled->text()));
}

std::string CompletionSession::replay(std::string_view initial_text,
                                      std::span<const FeedbackEvent> events) {
  std::string text(initial_text);
  for (const auto& e : events) {
    switch (e.kind) {
      case FeedbackKind::Accepted:
      case FeedbackKind::PartialAccept: text = text::append_with_space(text, e.payload); break;
      case FeedbackKind::Edited: text = e.payload; break;
      default: break;
    }
  }
  return text;
}

}  // namespace reportpilot::completion
