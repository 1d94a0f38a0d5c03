#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace vpe {

using Bytes = std::string;  // opaque byte string

/// True for names matching `[A-Za-z][A-Za-z0-9-]*`.
bool is_token(std::string_view s) noexcept;

/// Throws Error{BadName} unless is_token(s).
void require_token(std::string_view s, std::string_view what);

/// Lowercase RFC 4122 textual UUID, e.g. 1b4e28ba-2fa1-41d2-883f-0016d3cca427.
bool is_uuid(std::string_view s) noexcept;
std::string new_uuid();
std::optional<std::array<std::uint8_t, 16>> uuid_to_bytes(std::string_view s) noexcept;
std::string uuid_from_bytes(std::span<const std::uint8_t, 16> raw);

std::string base64_encode(std::string_view raw);
/// Strict decode; nullopt on any non-alphabet character or bad padding.
std::optional<std::string> base64_decode(std::string_view text);

std::int64_t now_ms();

/// "host:port" address of a service.
struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }
  /// Parses "host:port" or a bare port number.
  static Endpoint parse(std::string_view text);
};

}  // namespace vpe
