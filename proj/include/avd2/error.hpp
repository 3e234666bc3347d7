#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace avd2 {

enum class Errc {
    LengthMismatch,
    EmptyCorpus,
    TooFewSamples,
    DimensionMismatch,
    InvalidConfig,
    BadPrefix,
    AllMasked,
    InvalidTemperature,
    EmptyDataset,
    DuplicateId,
    MissingField,
    UnknownField,
    BadMagic,
    BadVersion,
    TruncatedFile,
    NonFiniteValue,
    MalformedReport,
    MalformedCheckpoint,
    RoleMismatch,
    NumericFailure,
    Io,
};

constexpr std::string_view to_string(Errc e) {
    switch (e) {
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::BadPrefix: return "BadPrefix";
    case Errc::AllMasked: return "AllMasked";
    case Errc::InvalidTemperature: return "InvalidTemperature";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::DuplicateId: return "DuplicateId";
    case Errc::MissingField: return "MissingField";
    case Errc::UnknownField: return "UnknownField";
    case Errc::BadMagic: return "BadMagic";
    case Errc::BadVersion: return "BadVersion";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::NonFiniteValue: return "NonFiniteValue";
    case Errc::MalformedReport: return "MalformedReport";
    case Errc::MalformedCheckpoint: return "MalformedCheckpoint";
    case Errc::RoleMismatch: return "RoleMismatch";
    case Errc::NumericFailure: return "NumericFailure";
    case Errc::Io: return "Io";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it onto an exit status.
class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

  private:
    Errc code_;
};

} // namespace avd2
