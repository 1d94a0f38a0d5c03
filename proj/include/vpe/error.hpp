#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vpe {

/// Failure codes shared by every component. The string form (see to_string)
/// is what travels over the wire and what operators see.
enum class Errc {
  BadName,
  NoTopic,
  IoFail,
  Closed,
  BadOffset,
  Cycle,
  Dangling,
  DupNode,
  DupLink,
  UnknownModule,
  Empty,
  BadNode,
  NotFound,
  EncodeInvalid,
  DecodeMalformed,
  DecodeInvalid,
  Misrouted,
  BadProducer,
  ExecFail,
  RouteMismatch,
  AlreadyRunning,
  NotRunning,
  BadParam,
  TypeMismatch,
  NoResult,
  BadIndex,
  BadRequest,
  Unavailable,
};

std::string_view to_string(Errc code) noexcept;

/// Inverse of to_string. Unrecognized strings map to Errc::BadRequest.
Errc errc_from_string(std::string_view name) noexcept;

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  Errc code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

}  // namespace vpe
