#include "vpe/common.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <chrono>
#include <mutex>
#include <random>

#include "vpe/error.hpp"

namespace vpe {

bool is_token(std::string_view s) noexcept {
  if (s.empty()) return false;
  auto alpha = [](char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'); };
  auto digit = [](char c) { return c >= '0' && c <= '9'; };
  if (!alpha(s.front())) return false;
  for (char c : s) {
    if (!alpha(c) && !digit(c) && c != '-') return false;
  }
  return true;
}

void require_token(std::string_view s, std::string_view what) {
  if (!is_token(s)) {
    throw Error(Errc::BadName, std::string(what) + " '" + std::string(s) + "' is not a valid token");
  }
}

namespace {

int hex_value(char c) noexcept {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  return -1;
}

constexpr bool is_dash_position(std::size_t i) { return i == 8 || i == 13 || i == 18 || i == 23; }

}  // namespace

bool is_uuid(std::string_view s) noexcept { return uuid_to_bytes(s).has_value(); }

std::optional<std::array<std::uint8_t, 16>> uuid_to_bytes(std::string_view s) noexcept {
  if (s.size() != 36) return std::nullopt;
  std::array<std::uint8_t, 16> out{};
  std::size_t k = 0;
  for (std::size_t i = 0; i < s.size();) {
    if (is_dash_position(i)) {
      if (s[i] != '-') return std::nullopt;
      ++i;
      continue;
    }
    int hi = hex_value(s[i]);
    int lo = hex_value(s[i + 1]);
    if (hi < 0 || lo < 0) return std::nullopt;
    out[k++] = static_cast<std::uint8_t>(hi * 16 + lo);
    i += 2;
  }
  return out;
}

std::string uuid_from_bytes(std::span<const std::uint8_t, 16> raw) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(36);
  for (std::size_t i = 0; i < 16; ++i) {
    if (i == 4 || i == 6 || i == 8 || i == 10) out.push_back('-');
    out.push_back(kHex[raw[i] >> 4]);
    out.push_back(kHex[raw[i] & 0xF]);
  }
  return out;
}

std::string new_uuid() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::array<std::uint8_t, 16> raw{};
  {
    std::lock_guard lock(mu);
    std::uint64_t a = rng();
    std::uint64_t b = rng();
    for (int i = 0; i < 8; ++i) {
      raw[i] = static_cast<std::uint8_t>(a >> (8 * i));
      raw[8 + i] = static_cast<std::uint8_t>(b >> (8 * i));
    }
  }
  raw[6] = static_cast<std::uint8_t>((raw[6] & 0x0F) | 0x40);  // version 4
  raw[8] = static_cast<std::uint8_t>((raw[8] & 0x3F) | 0x80);  // RFC 4122 variant
  return uuid_from_bytes(raw);
}

std::string base64_encode(std::string_view raw) {
  if (raw.empty()) return {};
  std::string out(4 * ((raw.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(raw.data()),
                          static_cast<int>(raw.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::optional<std::string> base64_decode(std::string_view text) {
  if (text.empty()) return std::string{};
  if (text.size() % 4 != 0) return std::nullopt;
  std::size_t pad = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    bool alphabet = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
                    c == '+' || c == '/';
    if (c == '=') {
      if (i + 2 < text.size()) return std::nullopt;
      ++pad;
    } else if (!alphabet || pad > 0) {
      return std::nullopt;
    }
  }
  std::string out(3 * (text.size() / 4), '\0');
  int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(text.data()),
                          static_cast<int>(text.size()));
  if (n < 0) return std::nullopt;
  // EVP_DecodeBlock counts padding as zero bytes.
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

Endpoint Endpoint::parse(std::string_view text) {
  Endpoint ep;
  std::string_view port_part = text;
  if (auto colon = text.rfind(':'); colon != std::string_view::npos) {
    ep.host = std::string(text.substr(0, colon));
    port_part = text.substr(colon + 1);
  }
  unsigned value = 0;
  auto [ptr, ec] = std::from_chars(port_part.data(), port_part.data() + port_part.size(), value);
  if (ec != std::errc{} || ptr != port_part.data() + port_part.size() || value > 65535) {
    throw Error(Errc::BadParam, "bad address '" + std::string(text) + "'");
  }
  ep.port = static_cast<std::uint16_t>(value);
  if (ep.host.empty()) ep.host = "127.0.0.1";
  return ep;
}

}  // namespace vpe
