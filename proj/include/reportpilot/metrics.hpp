#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "reportpilot/corpus.hpp"

namespace reportpilot::metrics {

using Tokens = std::vector<std::string>;

// Lowercase, whitespace split, ASCII punctuation stripped from both ends.
Tokens tokenize_eval(std::string_view text);

// Corpus BLEU-1..4 without smoothing. Throws LengthMismatch, EmptyCorpus.
std::array<double, 4> bleu(std::span<const Tokens> candidates, std::span<const Tokens> references);

// Per-sentence diagnostic: zero precisions replaced by 1e-9. Not canonical BLEU.
std::array<double, 4> sentence_bleu(const Tokens& candidate, const Tokens& reference);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

struct RougeL {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Throws EmptyText when either side is empty.
RougeL rouge_l(const Tokens& candidate, const Tokens& reference);

enum class Stratum { All, Normal, Abnormal };
std::string_view stratum_name(Stratum s);

struct EvalResult {
  Stratum stratum = Stratum::All;
  int n_cases = 0;
  std::array<double, 4> bleu{};
  RougeL rouge_l;  // dataset value: mean of per-case components
};

struct EvalPair {
  std::string candidate;
  std::string reference;
  corpus::CaseLabel label = corpus::CaseLabel::Unknown;
};

// All first, then Normal and Abnormal when they have cases. Throws EmptyCorpus.
std::vector<EvalResult> evaluate_dataset(std::span<const EvalPair> pairs);

nlohmann::json report_json(std::span<const EvalResult> results, std::string_view dataset,
                           std::string_view model);
std::string report_table(std::span<const EvalResult> results);

}  // namespace reportpilot::metrics
