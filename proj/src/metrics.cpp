#include "reportpilot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "reportpilot/error.hpp"
#include "reportpilot/text.hpp"

namespace reportpilot::metrics {

namespace {

bool is_ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= 33 && u <= 47) || (u >= 58 && u <= 64) || (u >= 91 && u <= 96) || (u >= 123 && u <= 126);
}

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(const Tokens& t, std::size_t n) {
  NgramCounts out;
  if (t.size() < n) return out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

// Clipped matches and total candidate n-grams for one pair.
std::pair<long, long> clipped(const Tokens& cand, const Tokens& ref, std::size_t n) {
  const auto c = ngrams(cand, n);
  const auto r = ngrams(ref, n);
  long matched = 0;
  for (const auto& [gram, count] : c) {
    const auto it = r.find(gram);
    if (it != r.end()) matched += std::min(count, it->second);
  }
  const long total = cand.size() >= n ? static_cast<long>(cand.size() - n + 1) : 0;
  return {matched, total};
}

std::array<double, 4> combine(const std::array<long, 4>& matched, const std::array<long, 4>& total,
                              long c_len, long r_len, double floor_precision) {
  std::array<double, 4> out{};
  if (c_len == 0) return out;
  const double bp = c_len > r_len ? 1.0 : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t k = 0; k < 4; ++k) {
    double p = total[k] > 0 ? static_cast<double>(matched[k]) / static_cast<double>(total[k]) : 0.0;
    if (p == 0.0) {
      if (floor_precision == 0.0) zero = true;
      p = floor_precision;
    }
    if (zero) continue;  // this and every higher order are 0
    log_sum += std::log(p);
    out[k] = bp * std::exp(log_sum / static_cast<double>(k + 1));
  }
  return out;
}

}  // namespace

Tokens tokenize_eval(std::string_view s) {
  Tokens out;
  for (const auto& raw : text::split_ws(s)) {
    std::size_t b = 0, e = raw.size();
    while (b < e && is_ascii_punct(raw[b])) ++b;
    while (e > b && is_ascii_punct(raw[e - 1])) --e;
    if (b < e) out.push_back(text::to_lower(std::string_view(raw).substr(b, e - b)));
  }
  return out;
}

std::array<double, 4> bleu(std::span<const Tokens> candidates, std::span<const Tokens> references) {
  if (candidates.size() != references.size())
    throw Error(Errc::LengthMismatch, std::to_string(candidates.size()) + " candidates vs " +
                                          std::to_string(references.size()) + " references");
  if (candidates.empty()) throw Error(Errc::EmptyCorpus);
  std::array<long, 4> matched{}, total{};
  long c_len = 0, r_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    c_len += static_cast<long>(candidates[i].size());
    r_len += static_cast<long>(references[i].size());
    for (std::size_t k = 0; k < 4; ++k) {
      const auto [m, t] = clipped(candidates[i], references[i], k + 1);
      matched[k] += m;
      total[k] += t;
    }
  }
  return combine(matched, total, c_len, r_len, 0.0);
}

std::array<double, 4> sentence_bleu(const Tokens& candidate, const Tokens& reference) {
  std::array<long, 4> matched{}, total{};
  for (std::size_t k = 0; k < 4; ++k) std::tie(matched[k], total[k]) = clipped(candidate, reference, k + 1);
  return combine(matched, total, static_cast<long>(candidate.size()), static_cast<long>(reference.size()), 1e-9);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeL rouge_l(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) throw Error(Errc::EmptyText, "rouge_l needs non-empty token lists");
  const auto l = static_cast<double>(lcs_length(candidate, reference));
  if (l == 0.0) return {};
  const double p = l / static_cast<double>(candidate.size());
  const double r = l / static_cast<double>(reference.size());
  return {p, r, 2.0 * p * r / (p + r)};
}

std::string_view stratum_name(Stratum s) {
  switch (s) {
    case Stratum::All: return "All";
    case Stratum::Normal: return "Normal";
    case Stratum::Abnormal: return "Abnormal";
  }
  return "All";
}

namespace {

// Sum in sorted order so the mean does not depend on case order.
double ordered_mean(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

EvalResult evaluate_stratum(Stratum stratum, const std::vector<const EvalPair*>& pairs) {
  std::vector<Tokens> cands, refs;
  std::vector<double> ps, rs, fs;
  for (const auto* p : pairs) {
    cands.push_back(tokenize_eval(p->candidate));
    refs.push_back(tokenize_eval(p->reference));
    if (cands.back().empty() || refs.back().empty()) {
      ps.push_back(0.0), rs.push_back(0.0), fs.push_back(0.0);
    } else {
      const auto r = rouge_l(cands.back(), refs.back());
      ps.push_back(r.precision), rs.push_back(r.recall), fs.push_back(r.f1);
    }
  }
  EvalResult out;
  out.stratum = stratum;
  out.n_cases = static_cast<int>(pairs.size());
  out.bleu = bleu(cands, refs);
  out.rouge_l = {ordered_mean(ps), ordered_mean(rs), ordered_mean(fs)};
  return out;
}

}  // namespace

std::vector<EvalResult> evaluate_dataset(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw Error(Errc::EmptyCorpus);
  std::vector<const EvalPair*> all, normal, abnormal;
  for (const auto& p : pairs) {
    all.push_back(&p);
    if (p.label == corpus::CaseLabel::Normal) normal.push_back(&p);
    if (p.label == corpus::CaseLabel::Abnormal) abnormal.push_back(&p);
  }
  std::vector<EvalResult> out{evaluate_stratum(Stratum::All, all)};
  if (!normal.empty()) out.push_back(evaluate_stratum(Stratum::Normal, normal));
  if (!abnormal.empty()) out.push_back(evaluate_stratum(Stratum::Abnormal, abnormal));
  return out;
}

nlohmann::json report_json(std::span<const EvalResult> results, std::string_view dataset,
                           std::string_view model) {
  auto strata = nlohmann::json::array();
  for (const auto& r : results) {
    strata.push_back({{"stratum", std::string(stratum_name(r.stratum))},
                      {"n_cases", r.n_cases},
                      {"bleu1", r.bleu[0]},
                      {"bleu2", r.bleu[1]},
                      {"bleu3", r.bleu[2]},
                      {"bleu4", r.bleu[3]},
                      {"rougeL_p", r.rouge_l.precision},
                      {"rougeL_r", r.rouge_l.recall},
                      {"rougeL_f1", r.rouge_l.f1}});
  }
  return {{"dataset", std::string(dataset)}, {"model", std::string(model)}, {"strata", strata}};
}

std::string report_table(std::span<const EvalResult> results) {
  std::string out = "stratum    n      BLEU-1  BLEU-2  BLEU-3  BLEU-4  ROUGE-L\n";
  char line[128];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-9s %5d   %.3f   %.3f   %.3f   %.3f   %.3f\n",
                  std::string(stratum_name(r.stratum)).c_str(), r.n_cases, r.bleu[0], r.bleu[1], r.bleu[2],
                  r.bleu[3], r.rouge_l.f1);
    out += line;
  }
  return out;
}

}  // namespace reportpilot::metrics
