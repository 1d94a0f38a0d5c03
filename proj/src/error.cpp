#include "vpe/error.hpp"

#include <array>
#include <utility>

namespace vpe {

namespace {

constexpr std::array<std::pair<Errc, std::string_view>, 28> kNames{{
    {Errc::BadName, "BAD_NAME"},
    {Errc::NoTopic, "NO_TOPIC"},
    {Errc::IoFail, "IO_FAIL"},
    {Errc::Closed, "CLOSED"},
    {Errc::BadOffset, "BAD_OFFSET"},
    {Errc::Cycle, "CYCLE"},
    {Errc::Dangling, "DANGLING"},
    {Errc::DupNode, "DUP_NODE"},
    {Errc::DupLink, "DUP_LINK"},
    {Errc::UnknownModule, "UNKNOWN_MODULE"},
    {Errc::Empty, "EMPTY"},
    {Errc::BadNode, "BAD_NODE"},
    {Errc::NotFound, "NOT_FOUND"},
    {Errc::EncodeInvalid, "ENCODE_INVALID"},
    {Errc::DecodeMalformed, "DECODE_MALFORMED"},
    {Errc::DecodeInvalid, "DECODE_INVALID"},
    {Errc::Misrouted, "MISROUTED"},
    {Errc::BadProducer, "BAD_PRODUCER"},
    {Errc::ExecFail, "EXEC_FAIL"},
    {Errc::RouteMismatch, "ROUTE_MISMATCH"},
    {Errc::AlreadyRunning, "ALREADY_RUNNING"},
    {Errc::NotRunning, "NOT_RUNNING"},
    {Errc::BadParam, "BAD_PARAM"},
    {Errc::TypeMismatch, "TYPE_MISMATCH"},
    {Errc::NoResult, "NO_RESULT"},
    {Errc::BadIndex, "BAD_INDEX"},
    {Errc::BadRequest, "BAD_REQUEST"},
    {Errc::Unavailable, "UNAVAILABLE"},
}};

}  // namespace

std::string_view to_string(Errc code) noexcept {
  for (const auto& [c, name] : kNames) {
    if (c == code) return name;
  }
  return "UNKNOWN";
}

Errc errc_from_string(std::string_view name) noexcept {
  for (const auto& [c, n] : kNames) {
    if (n == name) return c;
  }
  return Errc::BadRequest;
}

}  // namespace vpe
