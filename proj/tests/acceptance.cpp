// Acceptance checks. One PASS/FAIL line per criterion; exit status is the
// number of failures (capped at 1).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>

#include "helpers.hpp"
#include "oracles.hpp"
#include "reportpilot/completion.hpp"
#include "reportpilot/corpus.hpp"
#include "reportpilot/metrics.hpp"
#include "reportpilot/promptgen.hpp"
#include "reportpilot/radiomics.hpp"
#include "reportpilot/remote_backend.hpp"
#include "reportpilot/rule_backend.hpp"
#include "reportpilot/service.hpp"
#include "reportpilot/text.hpp"

using namespace reportpilot;
using namespace std::chrono_literals;
using testutil::json;
namespace fs = std::filesystem;

namespace {

// Pinned limits.
constexpr double kPromptMaxMs = 1.0;
constexpr double kRadiomicsMaxS = 5.0;
constexpr double kMetricsMaxS = 5.0;
constexpr double kTrendMaxS = 60.0;
constexpr double kE2EMaxS = 30.0;
constexpr double kBleuTol = 1e-12;
constexpr double kRougeTol = 1e-9;
constexpr double kMinBleu4Gap = 0.10;
constexpr double kMinTokensPerSec = 500.0;  // 10x the 50 tokens/sec reference rate
constexpr double kTpsRelTol = 0.01;
constexpr int kTrendCases = 500;
constexpr std::uint64_t kTrendSeed = 20240601;

const std::string kNormal = "The kidneys have a normal appearance.";

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome prompt_fidelity() {
  Outcome o;
  radiomics::OrganFeatureSet l, r;
  l.organ = "kidney_left";
  l.volume_cm3 = 170;
  r.organ = "kidney_right";
  r.volume_cm3 = 179;
  const std::vector<radiomics::OrganFeatureSet> f = {l, r};
  const auto t0 = std::chrono::steady_clock::now();
  const auto p = promptgen::render_prompt(f, radiomics::paired_ratio(l, r), "kidney", "");
  const double ms = seconds_since(t0) * 1000.0;
  o.require(p.rendered == "Left kidney volume: 170 cm3, Right kidney volume: 179 cm3, the volume ratio is 0.95",
            "rendered '" + p.rendered + "'");
  o.require(ms < kPromptMaxMs, "took " + fmt("%.3f", ms) + " ms");
  o.detail = o.pass ? "byte-exact, " + fmt("%.3f", ms) + " ms" : o.detail;
  return o;
}

Outcome radiomics_oracles() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937 rng(4242);
  int checked = 0, mismatches = 0, property_failures = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto [v, m] = oracle::random_pair(rng, 16);
    const double voxel_mm3 = m.spacing[0] * m.spacing[1] * m.spacing[2];
    for (std::uint32_t label = 1; label <= 2; ++label) {
      const auto count = oracle::count_voxels(m, label);
      if (count == 0) continue;
      const auto f = radiomics::compute_features(v, m, label);
      ++checked;
      if (f.voxel_count != count || f.volume_cm3 != static_cast<double>(count) * voxel_mm3 / 1000.0 ||
          f.surface_area_mm2 != oracle::surface_area(m, label))
        ++mismatches;

      auto v2 = v;
      auto m2 = m;
      for (int i = 0; i < 3; ++i) v2.spacing[i] = m2.spacing[i] = 2 * m.spacing[i];
      const auto g = radiomics::compute_features(v2, m2, label);
      if (g.volume_cm3 != 8 * f.volume_cm3 || g.surface_area_mm2 != 4 * f.surface_area_mm2 ||
          std::abs(g.sphericity - f.sphericity) > 1e-12 * f.sphericity)
        ++property_failures;
      const auto [vt, mt] = oracle::padded(v, m, 1 + trial % 3, 2, trial % 4);
      const auto t = radiomics::compute_features(vt, mt, label);
      if (t.volume_cm3 != f.volume_cm3 || t.surface_area_mm2 != f.surface_area_mm2 ||
          t.sphericity != f.sphericity || t.intensity_mean != f.intensity_mean)
        ++property_failures;
    }
  }
  const double s = seconds_since(t0);
  o.require(mismatches == 0, std::to_string(mismatches) + " oracle mismatches");
  o.require(property_failures == 0, std::to_string(property_failures) + " scale/translation failures");
  o.require(s < kRadiomicsMaxS, "took " + fmt("%.2f", s) + " s");
  if (o.pass) o.detail = std::to_string(checked) + " labels on 200 masks exact, " + fmt("%.2f", s) + " s";
  return o;
}

Outcome metrics_fixtures() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  using metrics::Tokens;
  const std::vector<Tokens> same = {{"the", "kidneys", "have", "a", "normal", "appearance"}};
  for (double b : metrics::bleu(same, same)) o.require(b == 1.0, "identity BLEU " + fmt("%.6f", b));
  const std::vector<Tokens> cand = {{"the", "the", "the", "the"}};
  const std::vector<Tokens> ref = {{"the", "cat"}};
  const double b1 = metrics::bleu(cand, ref)[0];
  o.require(std::abs(b1 - 0.25) <= kBleuTol, "clipped BLEU-1 " + fmt("%.15f", b1));
  const double f1 = metrics::rouge_l({"the", "cat", "sat", "on", "the", "mat"}, {"the", "cat", "ate", "the", "mat"}).f1;
  o.require(std::abs(f1 - 8.0 / 11.0) <= kRougeTol, "ROUGE-L F1 " + fmt("%.12f", f1));

  std::mt19937 rng(99);
  int lcs_bad = 0;
  for (int i = 0; i < 500; ++i) {
    auto gen = [&] {
      Tokens t(1 + rng() % 10);
      for (auto& w : t) w = "w" + std::to_string(rng() % 4);
      return t;
    };
    const auto a = gen(), b = gen();
    if (metrics::lcs_length(a, b) != oracle::lcs_brute(a, b)) ++lcs_bad;
  }
  o.require(lcs_bad == 0, std::to_string(lcs_bad) + " LCS mismatches of 500");
  const double s = seconds_since(t0);
  o.require(s < kMetricsMaxS, "took " + fmt("%.2f", s) + " s");
  if (o.pass) o.detail = "BLEU-1 0.25, ROUGE-L F1 " + fmt("%.9f", f1) + ", 500 LCS pairs, " + fmt("%.2f", s) + " s";
  return o;
}

struct TrendResult {
  std::vector<metrics::EvalResult> with, without;
};

// Builds both datasets from the synthetic corpus, splits 9:1 with the same
// seed, completes the test inputs with the rule backend and scores them.
TrendResult run_trend() {
  const auto cases = corpus::generate_synthetic_corpus(kTrendCases, kTrendSeed);
  std::vector<corpus::TrainingTriplet> with, without;
  for (const auto& c : cases) {
    const auto doc = corpus::parse_report_sections(c.report, c.case_id);
    const auto section = corpus::extract_organ_section(doc, "kidney");
    const std::vector<radiomics::OrganFeatureSet> f = {c.left, c.right};
    corpus::TripletMeta meta{c.case_id, "kidney", corpus::Condition::WithRadiomics, c.label};
    with.push_back(corpus::build_triplet(f, c.ratio, section, "kidney", meta));
    without.push_back(corpus::build_prefix_triplet(section, "kidney", meta));
  }
  const corpus::SplitSpec spec{0.9, kTrendSeed};
  const auto test_with = corpus::split(with, spec).second;
  const auto test_without = corpus::split(without, spec).second;

  completion::RuleBackend backend;
  auto score = [&](const std::vector<corpus::TrainingTriplet>& test) {
    std::vector<metrics::EvalPair> pairs;
    for (const auto& t : test) {
      std::string out;
      for (const auto& tok : completion::generate_all(backend, t.input, {})) out += tok;
      pairs.push_back({out, t.target, t.meta.label});
    }
    return metrics::evaluate_dataset(pairs);
  };
  return {score(test_with), score(test_without)};
}

const metrics::EvalResult* stratum(const std::vector<metrics::EvalResult>& r, metrics::Stratum s) {
  for (const auto& e : r)
    if (e.stratum == s) return &e;
  return nullptr;
}

Outcome trend(const TrendResult& t, double seconds) {
  Outcome o;
  const auto* w = stratum(t.with, metrics::Stratum::All);
  const auto* wo = stratum(t.without, metrics::Stratum::All);
  const double gap = w->bleu[3] - wo->bleu[3];
  o.require(gap >= kMinBleu4Gap, "BLEU-4 gap " + fmt("%.4f", gap));
  o.require(w->rouge_l.f1 > wo->rouge_l.f1, "ROUGE-L not higher with radiomics");
  o.require(seconds < kTrendMaxS, "took " + fmt("%.2f", seconds) + " s");
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("test n=") + std::to_string(w->n_cases) +
              ", BLEU-4 " + fmt("%.3f", w->bleu[3]) + " vs " + fmt("%.3f", wo->bleu[3]) + ", ROUGE-L " +
              fmt("%.3f", w->rouge_l.f1) + " vs " + fmt("%.3f", wo->rouge_l.f1) + ", " + fmt("%.2f", seconds) + " s";
  return o;
}

Outcome trend_strata(const TrendResult& t) {
  Outcome o;
  const auto* n = stratum(t.with, metrics::Stratum::Normal);
  const auto* a = stratum(t.with, metrics::Stratum::Abnormal);
  o.require(n && a, "a stratum is empty");
  if (!o.pass) return o;
  o.require(a->bleu[3] >= n->bleu[3], "Abnormal BLEU-4 below Normal");
  o.detail += (o.detail.empty() ? "" : "; ") + std::string("with radiomics: Abnormal BLEU-4 ") +
              fmt("%.3f", a->bleu[3]) + " (n=" + std::to_string(a->n_cases) + ") vs Normal " + fmt("%.3f", n->bleu[3]) +
              " (n=" + std::to_string(n->n_cases) + ")";
  return o;
}

Outcome split_determinism() {
  Outcome o;
  std::vector<int> items(208);
  std::iota(items.begin(), items.end(), 0);
  const auto a = corpus::split(items, {0.9, 7});
  const auto b = corpus::split(items, {0.9, 7});
  o.require(a.first.size() == 187 && a.second.size() == 21,
            std::to_string(a.first.size()) + "/" + std::to_string(a.second.size()));
  o.require(a == b, "partitions differ across runs");
  std::vector<int> all = a.first;
  all.insert(all.end(), a.second.begin(), a.second.end());
  std::sort(all.begin(), all.end());
  o.require(all == items, "not a set partition");
  if (o.pass) o.detail = "187/21, identical across runs";
  return o;
}

// ---------------------------------------------------------------------------

json post_json(httplib::Client& c, const std::string& path, const json& body = json::object()) {
  auto r = c.Post(path, body.dump(), "application/json");
  if (!r) throw std::runtime_error("POST " + path + " failed");
  auto j = json::parse(r->body);
  j["_status"] = r->status;
  return j;
}

Outcome end_to_end() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = testutil::temp_dir("accept-e2e");
  const int port = testutil::free_port();
  corpus::write_file(dir / "service.json",
                     json{{"server", {{"port", port}}}, {"data_dir", (dir / "data").string()}, {"backend", {{"kind", "rule"}}}}.dump());
  std::string sid, expected_report;
  std::size_t expected_words = text::split_ws(kNormal).size();
  {
    testutil::ServeProcess serve(dir / "service.json", dir);
    if (!serve.wait_ready(port)) {
      o.require(false, "service did not start");
      return o;
    }
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(10, 0);
    auto up = testutil::upload_study(c, testutil::kidney_study());
    o.require(up && up->status == 201, "upload failed");
    if (!o.pass) return o;
    const auto study = json::parse(up->body)["study_id"].get<std::string>();
    o.require(post_json(c, "/studies/" + study + "/analyze")["_status"] == 200, "analyze failed");
    const auto session = post_json(c, "/sessions", {{"study_id", study}, {"organ", "kidney"}});
    o.require(session["_status"] == 201, "session failed");
    if (!o.pass) return o;
    sid = session["session_id"].get<std::string>();

    auto sse = c.Get("/sessions/" + sid + "/suggestion");
    o.require(sse && sse->status == 200, "suggestion request failed");
    if (!o.pass) return o;
    const auto events = testutil::parse_sse(sse->body);
    std::vector<std::string> tokens;
    bool ordered = true;
    for (const auto& e : events) {
      if (e.event != "token") continue;
      ordered = ordered && e.data["index"] == tokens.size();
      tokens.push_back(e.data["text"].get<std::string>());
    }
    o.require(ordered, "token indices out of order");
    o.require(tokens == completion::word_tokens(kNormal), "tokens do not spell the normal sentence");
    o.require(tokens.size() == expected_words, std::to_string(tokens.size()) + " tokens");
    o.require(!events.empty() && events.back().event == "done", "no done event");
    if (!o.pass) return o;
    const auto& done = events.back().data;
    const double count = done["token_count"].get<double>();
    const double ms = done["elapsed_ms"].get<double>();
    const double tps = done["tokens_per_sec"].get<double>();
    o.require(done.contains("suggestion_id") && count == static_cast<double>(tokens.size()), "done token_count");
    o.require(std::abs(tps - count / (ms / 1000.0)) <= kTpsRelTol * tps, "done tokens_per_sec inconsistent");
    expected_report = post_json(c, "/sessions/" + sid + "/accept")["accepted_text"].get<std::string>();
    o.require(expected_report == kNormal, "accepted text '" + expected_report + "'");
    serve.kill(SIGKILL);
  }
  {
    testutil::ServeProcess serve(dir / "service.json", dir);
    if (!serve.wait_ready(port)) {
      o.require(false, "service did not restart");
      return o;
    }
    httplib::Client c("127.0.0.1", port);
    auto r = c.Get("/sessions/" + sid + "/report");
    o.require(r && r->status == 200, "report unavailable after restart");
    if (r && r->status == 200) {
      const auto j = json::parse(r->body);
      o.require(j["accepted_text"] == expected_report, "report changed across kill -9");
      o.require(j["event_count"] == 2, "event_count " + j["event_count"].dump());
    }
    serve.kill(SIGTERM);
  }
  const double s = seconds_since(t0);
  o.require(s < kE2EMaxS, "took " + fmt("%.2f", s) + " s");
  fs::remove_all(dir);
  if (o.pass)
    o.detail = std::to_string(expected_words) + " tokens in order, done well-formed, report intact after kill -9, " +
               fmt("%.2f", s) + " s";
  return o;
}

struct InProcess {
  explicit InProcess(std::chrono::microseconds interval) : dir(testutil::temp_dir("accept-svc")) {
    service::ServiceConfig c;
    c.port = 0;
    c.data_dir = dir;
    svc = std::make_unique<service::Service>(
        c, std::make_shared<completion::RuleBackend>(completion::RuleSet::standard(), interval));
    port = svc->start();
  }
  ~InProcess() {
    svc->stop();
    fs::remove_all(dir);
  }
  fs::path dir;
  std::unique_ptr<service::Service> svc;
  int port = 0;
};

std::string open_session(httplib::Client& c) {
  auto up = testutil::upload_study(c, testutil::kidney_study());
  const auto study = json::parse(up->body)["study_id"].get<std::string>();
  post_json(c, "/studies/" + study + "/analyze");
  return post_json(c, "/sessions", {{"study_id", study}, {"organ", "kidney"}})["session_id"].get<std::string>();
}

Outcome cancellation() {
  Outcome o;
  InProcess svc(100ms);
  httplib::Client c("127.0.0.1", svc.port);
  c.set_read_timeout(10, 0);
  const auto sid = open_session(c);
  const auto log_path = svc.dir / "sessions" / sid / "events.jsonl";

  // Explicit cancel while another client streams.
  int received = 0;
  std::string cancel_event;
  std::thread reader([&] {
    httplib::Client c2("127.0.0.1", svc.port);
    c2.set_read_timeout(10, 0);
    auto r = c2.Get("/sessions/" + sid + "/suggestion");
    if (!r) return;
    for (const auto& e : testutil::parse_sse(r->body)) {
      if (e.event == "token") ++received;
      else cancel_event = e.event + ":" + e.data.value("error", "");
    }
  });
  std::this_thread::sleep_for(250ms);
  o.require(post_json(c, "/sessions/" + sid + "/cancel")["_status"] == 200, "cancel rejected");
  reader.join();
  auto log = service::EventLog::read(log_path);
  const auto at_cancel = completion::word_tokens(log.back().event.payload).size();
  const int post_cancel = received - static_cast<int>(at_cancel);
  o.require(log.back().event.kind == completion::FeedbackKind::Cancelled, "no Cancelled event logged");
  o.require(post_cancel <= 1, std::to_string(post_cancel) + " tokens after cancel");
  o.require(cancel_event == "error:Cancelled", "stream ended with '" + cancel_event + "'");

  // Client aborts the stream mid-way.
  int seen = 0;
  c.Get("/sessions/" + sid + "/suggestion", [&](const char* data, std::size_t n) {
    seen += static_cast<int>(std::count(data, data + n, '\n')) / 3;
    return seen < 2;
  });
  bool cancelled = false;
  for (int i = 0; i < 60 && !cancelled; ++i) {
    log = service::EventLog::read(log_path);
    cancelled = log.back().event.kind == completion::FeedbackKind::Cancelled && log.size() == 4;
    if (!cancelled) std::this_thread::sleep_for(50ms);
  }
  o.require(cancelled, "disconnect did not cancel the suggestion");

  auto again = c.Get("/sessions/" + sid + "/suggestion");
  const auto events = again ? testutil::parse_sse(again->body) : std::vector<testutil::SseEvent>{};
  o.require(again && again->status == 200 && !events.empty() && events.back().event == "done",
            "session not reusable after cancel");
  if (o.pass)
    o.detail = std::to_string(received) + " tokens before cancel, " + std::to_string(std::max(post_cancel, 0)) +
               " after; abort cancels; next suggestion completes";
  return o;
}

Outcome throughput() {
  Outcome o;
  auto backend = std::make_shared<completion::RuleBackend>();
  completion::CompletionSession s("tp", "kidney",
                                  "Left kidney volume: 172 cm3, Right kidney volume: 184 cm3, the volume ratio is 0.93");
  std::vector<double> rates;
  for (int i = 0; i < 50; ++i) {
    auto sug = s.propose(backend, {});
    sug->wait_finished(5s);
    const auto tps = sug->tokens_per_sec();
    o.require(tps.has_value(), "suggestion without tokens_per_sec");
    if (!tps) break;
    rates.push_back(*tps);
    s.reject();
  }
  if (rates.empty()) return o;
  std::sort(rates.begin(), rates.end());
  const double median = rates[rates.size() / 2];
  o.require(median >= kMinTokensPerSec, "median " + fmt("%.0f", median) + " tok/s");
  if (o.pass) o.detail = "median " + fmt("%.0f", median) + " tok/s over 50 suggestions (min " + fmt("%.0f", rates.front()) + ")";
  return o;
}

Outcome remote_conformance() {
  Outcome o;
  testutil::MockChatServer mock;
  auto make = [&](const std::string& model, double timeout) {
    completion::RemoteConfig c;
    c.base_url = mock.base_url();
    c.model = model;
    c.api_key_env = "";
    c.timeout_s = timeout;
    return completion::RemoteBackend(c);
  };
  auto code = [](const std::function<void()>& f) -> std::string {
    try {
      f();
    } catch (const Error& e) {
      return std::string(e.name());
    }
    return "none";
  };
  auto ok = make("ok", 5);
  o.require(completion::generate_all(ok, "p", {}) == std::vector<std::string>{"Normal ", "kidneys."}, "token order");
  auto split = make("split", 5);
  o.require(completion::generate_all(split, "p", {}) == std::vector<std::string>{"Normal ", "kidneys."},
            "split chunks");
  auto no_done = make("no-done", 5);
  o.require(code([&] { completion::generate_all(no_done, "p", {}); }) == "StreamCorrupt", "missing [DONE]");
  auto slow = make("slow", 0.5);
  o.require(code([&] { completion::generate_all(slow, "p", {}); }) == "BackendTimeout", "timeout");
  auto bad = make("bad-json", 5);
  o.require(code([&] { completion::generate_all(bad, "p", {}); }) == "StreamCorrupt", "malformed chunk");
  const auto body = json::parse(mock.last_body());
  o.require(body["stream"] == true && body["messages"].size() == 2, "request body shape");
  if (o.pass) o.detail = "order, [DONE], timeout and malformed-chunk paths";
  return o;
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](const char* name, const Outcome& o) {
    std::printf("%s  %-28s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };
  auto guarded = [&](const char* name, const std::function<Outcome()>& f) {
    try {
      report(name, f());
    } catch (const std::exception& e) {
      Outcome o;
      o.require(false, std::string("exception: ") + e.what());
      report(name, o);
    }
  };

  guarded("prompt-fidelity", prompt_fidelity);
  guarded("radiomics-oracles", radiomics_oracles);
  guarded("metrics-fixtures", metrics_fixtures);
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const auto t = run_trend();
    const double s = seconds_since(t0);
    report("trend-with-vs-without", trend(t, s));
    report("trend-abnormal-vs-normal", trend_strata(t));
  } catch (const std::exception& e) {
    Outcome o;
    o.require(false, std::string("exception: ") + e.what());
    report("trend-with-vs-without", o);
    report("trend-abnormal-vs-normal", o);
  }
  guarded("split-determinism", split_determinism);
  guarded("end-to-end-service", end_to_end);
  guarded("cancellation", cancellation);
  guarded("throughput", throughput);
  guarded("remote-conformance", remote_conformance);

  std::printf("%d failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}
