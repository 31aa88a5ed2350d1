#include "reportpilot/error.hpp"

namespace reportpilot {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::BadMagic: return "BadMagic";
    case Errc::UnsupportedDatatype: return "UnsupportedDatatype";
    case Errc::TruncatedData: return "TruncatedData";
    case Errc::NonPositiveSpacing: return "NonPositiveSpacing";
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::MaskDtypeNotInteger: return "MaskDtypeNotInteger";
    case Errc::UnknownLabel: return "UnknownLabel";
    case Errc::DimsMismatch: return "DimsMismatch";
    case Errc::SpacingMismatch: return "SpacingMismatch";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::LabelAbsent: return "LabelAbsent";
    case Errc::MisalignedInputs: return "MisalignedInputs";
    case Errc::ZeroVolume: return "ZeroVolume";
    case Errc::NoPipelineMatches: return "NoPipelineMatches";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::OrganMismatch: return "OrganMismatch";
    case Errc::EmptyFeatures: return "EmptyFeatures";
    case Errc::BackendUnavailable: return "BackendUnavailable";
    case Errc::BackendTimeout: return "BackendTimeout";
    case Errc::StreamCorrupt: return "StreamCorrupt";
    case Errc::SuggestionInFlight: return "SuggestionInFlight";
    case Errc::EmptyPrompt: return "EmptyPrompt";
    case Errc::NoSuggestion: return "NoSuggestion";
    case Errc::NotComplete: return "NotComplete";
    case Errc::OrganNotMentioned: return "OrganNotMentioned";
    case Errc::UnknownOrgan: return "UnknownOrgan";
    case Errc::EmptyTarget: return "EmptyTarget";
    case Errc::TooFewItems: return "TooFewItems";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::EmptyText: return "EmptyText";
    case Errc::NotFound: return "NotFound";
    case Errc::NotAnalyzed: return "NotAnalyzed";
    case Errc::UnsupportedFormat: return "UnsupportedFormat";
    case Errc::IoError: return "IoError";
    case Errc::ParseError: return "ParseError";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& detail)
    : std::runtime_error(detail.empty() ? std::string(errc_name(code))
                                        : std::string(errc_name(code)) + ": " + detail),
      code_(code),
      detail_(detail) {}

Error::Error(Errc code) : Error(code, std::string()) {}

}  // namespace reportpilot
