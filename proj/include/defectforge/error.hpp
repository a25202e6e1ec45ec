#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace defectforge {

enum class ErrorCode {
  NotFound,
  UnsupportedFormat,
  CorruptHeader,
  IoFailure,
  InvalidArgument,
  DimensionTooSmall,
  DimensionMismatch,
  EmptyMask,
  PatchDoesNotFit,
  DidNotConverge,
  MaskTouchesBorder,
  UnknownDefectType,
  ServiceUnavailable,
  MalformedResponse,
  PortInUse,
  ImageTooSmall,
  DegenerateImage,
  PatchTooLarge,
  NonFiniteLoss,
  OneClassOnly,
  EngineFailure,
  AcceptanceExhausted,
  ManifestInvalid,
};

std::string_view to_string(ErrorCode code);

// Every failure in the library surfaces as an Error carrying a stable code.
// `subject` names the offending entity (file path, sample id, endpoint) when
// there is one.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message, std::string subject = {});

  ErrorCode code() const noexcept { return code_; }
  const std::string& subject() const noexcept { return subject_; }
  // The message without the subject appended.
  const std::string& message() const noexcept { return message_; }

  // {"error": "<Code>", "message": "...", "subject": "..."}
  std::string to_json() const;

 private:
  ErrorCode code_;
  std::string message_;
  std::string subject_;
};

}  // namespace defectforge
