#pragma once

// Length-prefixed request/response framing over TCP.
//
//   frame := opcode:u8  length:u32be  body[length]
//
// Bodies are JSON. A server answers each request frame with one frame that
// carries the same opcode.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "vpe/common.hpp"

namespace vpe::net {

inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;

struct Frame {
  std::uint8_t opcode = 0;
  std::string body;
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) noexcept : fd_(fd) {}
  Socket(Socket&& other) noexcept : fd_(other.release()) {}
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  int release() noexcept;
  void reset() noexcept;
  /// Wakes any thread blocked on this socket.
  void shutdown() noexcept;

 private:
  int fd_ = -1;
};

/// Throws Error{UNAVAILABLE} if nothing accepts within `timeout`.
Socket connect_to(const Endpoint& ep, std::chrono::milliseconds timeout = std::chrono::milliseconds(2000));

/// Throws Error{IO_FAIL} on a broken connection.
void write_frame(Socket& s, const Frame& f);
/// nullopt on orderly EOF before the first byte; Error{IO_FAIL} otherwise.
std::optional<Frame> read_frame(Socket& s);

/// Per-connection request handler; one instance per accepted connection.
class Session {
 public:
  virtual ~Session() = default;
  virtual Frame handle(const Frame& request) = 0;
};

/// Thread-per-connection frame server.
class FrameServer {
 public:
  using SessionFactory = std::function<std::unique_ptr<Session>()>;

  /// Binds 127.0.0.1-or-`host`:`port` (0 picks a free port) and starts accepting.
  FrameServer(std::string host, std::uint16_t port, SessionFactory factory);
  ~FrameServer();
  FrameServer(const FrameServer&) = delete;
  FrameServer& operator=(const FrameServer&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  void stop();

 private:
  void accept_loop();
  void serve(const std::shared_ptr<Socket>& conn);
  void reap_finished();

  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };

  SessionFactory factory_;
  Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::vector<std::shared_ptr<Socket>> conns_;
  std::vector<Worker> workers_;
};

/// Blocking request/response client over one connection, reconnecting lazily
/// after a failure. Thread-safe (calls are serialized).
class FrameClient {
 public:
  explicit FrameClient(Endpoint ep) : ep_(std::move(ep)) {}

  /// Sends `body` under `opcode` and returns the decoded reply. Replies of the
  /// form {"ok":false,"code":C,"detail":D} are rethrown as Error{C}.
  nlohmann::json call(std::uint8_t opcode, const nlohmann::json& body);
  const Endpoint& endpoint() const noexcept { return ep_; }
  /// Drops the connection; the next call reconnects.
  void disconnect();

 private:
  Endpoint ep_;
  std::mutex mu_;
  Socket sock_;
};

nlohmann::json ok_reply(nlohmann::json fields = nlohmann::json::object());
nlohmann::json error_reply(std::string_view code, std::string_view detail);

/// Writes the bound port to `path` (atomically) so launchers of a server
/// started with port 0 can find it.
void write_port_file(const std::string& path, std::uint16_t port);

}  // namespace vpe::net
