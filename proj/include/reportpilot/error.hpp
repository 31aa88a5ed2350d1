#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace reportpilot {

// Error kinds surfaced by every module. The enumerator name is the stable
// identifier reported by the CLI and in service error bodies.
enum class Errc {
  // imaging
  BadMagic,
  UnsupportedDatatype,
  TruncatedData,
  NonPositiveSpacing,
  MalformedHeader,
  LengthMismatch,
  MaskDtypeNotInteger,
  UnknownLabel,
  DimsMismatch,
  SpacingMismatch,
  IndexOutOfRange,
  // radiomics
  LabelAbsent,
  MisalignedInputs,
  ZeroVolume,
  // router
  NoPipelineMatches,
  InvalidConfig,
  // promptgen
  OrganMismatch,
  EmptyFeatures,
  // completion
  BackendUnavailable,
  BackendTimeout,
  StreamCorrupt,
  SuggestionInFlight,
  EmptyPrompt,
  NoSuggestion,
  NotComplete,
  // corpus
  OrganNotMentioned,
  UnknownOrgan,
  EmptyTarget,
  TooFewItems,
  InvalidArgument,
  // metrics
  EmptyCorpus,
  EmptyText,
  // service / io
  NotFound,
  NotAnalyzed,
  UnsupportedFormat,
  IoError,
  ParseError,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail);
  explicit Error(Errc code);

  Errc code() const noexcept { return code_; }
  std::string_view name() const noexcept { return errc_name(code_); }
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

}  // namespace reportpilot
