#include "defectforge/error.hpp"

#include <nlohmann/json.hpp>

namespace defectforge {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::CorruptHeader: return "CorruptHeader";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DimensionTooSmall: return "DimensionTooSmall";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::PatchDoesNotFit: return "PatchDoesNotFit";
    case ErrorCode::DidNotConverge: return "DidNotConverge";
    case ErrorCode::MaskTouchesBorder: return "MaskTouchesBorder";
    case ErrorCode::UnknownDefectType: return "UnknownDefectType";
    case ErrorCode::ServiceUnavailable: return "ServiceUnavailable";
    case ErrorCode::MalformedResponse: return "MalformedResponse";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::DegenerateImage: return "DegenerateImage";
    case ErrorCode::PatchTooLarge: return "PatchTooLarge";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::OneClassOnly: return "OneClassOnly";
    case ErrorCode::EngineFailure: return "EngineFailure";
    case ErrorCode::AcceptanceExhausted: return "AcceptanceExhausted";
    case ErrorCode::ManifestInvalid: return "ManifestInvalid";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, std::string message, std::string subject)
    : std::runtime_error(subject.empty() ? message : message + ": " + subject),
      code_(code),
      message_(std::move(message)),
      subject_(std::move(subject)) {}

std::string Error::to_json() const {
  nlohmann::json j;
  j["error"] = std::string(to_string(code_));
  j["message"] = message_;
  if (!subject_.empty()) j["subject"] = subject_;
  return j.dump();
}

}  // namespace defectforge
