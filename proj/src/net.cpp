#include "vpe/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <spdlog/spdlog.h>

#include "vpe/error.hpp"

namespace vpe::net {

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    reset();
    fd_ = other.release();
  }
  return *this;
}

int Socket::release() noexcept {
  int fd = fd_;
  fd_ = -1;
  return fd;
}

void Socket::reset() noexcept {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Socket::shutdown() noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

namespace {

[[noreturn]] void io_fail(const std::string& what) { throw Error(Errc::IoFail, what + ": " + std::strerror(errno)); }

sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  std::string host = ep.host == "localhost" ? "127.0.0.1" : ep.host;
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw Error(Errc::Unavailable, "cannot resolve host '" + ep.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

void send_all(int fd, const char* data, std::size_t n) {
  while (n > 0) {
    ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      io_fail("send");
    }
    data += w;
    n -= static_cast<std::size_t>(w);
  }
}

// Returns false on EOF before any byte was read.
bool recv_all(int fd, char* data, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::recv(fd, data + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw Error(Errc::IoFail, "connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      io_fail("recv");
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

}  // namespace

Socket connect_to(const Endpoint& ep, std::chrono::milliseconds timeout) {
  sockaddr_in addr = resolve(ep);
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) io_fail("socket");
  int flags = ::fcntl(s.fd(), F_GETFL, 0);
  ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  if (rc != 0 && errno != EINPROGRESS) {
    throw Error(Errc::Unavailable, "connect " + ep.str() + ": " + std::strerror(errno));
  }
  if (rc != 0) {
    pollfd pfd{s.fd(), POLLOUT, 0};
    int ready = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
    if (ready <= 0 || err != 0) {
      throw Error(Errc::Unavailable, "connect " + ep.str() + ": " + (err ? std::strerror(err) : "timed out"));
    }
  }
  ::fcntl(s.fd(), F_SETFL, flags);
  int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

void write_frame(Socket& s, const Frame& f) {
  if (f.body.size() > kMaxFrameBytes) throw Error(Errc::IoFail, "frame too large");
  std::string buf;
  buf.reserve(5 + f.body.size());
  auto len = static_cast<std::uint32_t>(f.body.size());
  buf.push_back(static_cast<char>(f.opcode));
  for (int shift = 24; shift >= 0; shift -= 8) buf.push_back(static_cast<char>((len >> shift) & 0xFF));
  buf += f.body;
  send_all(s.fd(), buf.data(), buf.size());
}

std::optional<Frame> read_frame(Socket& s) {
  unsigned char header[5];
  if (!recv_all(s.fd(), reinterpret_cast<char*>(header), sizeof header)) return std::nullopt;
  std::uint32_t len = (std::uint32_t{header[1]} << 24) | (std::uint32_t{header[2]} << 16) |
                      (std::uint32_t{header[3]} << 8) | std::uint32_t{header[4]};
  if (len > kMaxFrameBytes) throw Error(Errc::IoFail, "frame too large");
  Frame f;
  f.opcode = header[0];
  f.body.resize(len);
  if (len > 0 && !recv_all(s.fd(), f.body.data(), len)) throw Error(Errc::IoFail, "connection closed mid-frame");
  return f;
}

FrameServer::FrameServer(std::string host, std::uint16_t port, SessionFactory factory) : factory_(std::move(factory)) {
  listener_ = Socket(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!listener_.valid()) io_fail("socket");
  int one = 1;
  ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr = resolve(Endpoint{host, port});
  if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    throw Error(Errc::IoFail, "bind " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
  }
  if (::listen(listener_.fd(), 64) != 0) io_fail("listen");
  socklen_t len = sizeof addr;
  ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

FrameServer::~FrameServer() { stop(); }

void FrameServer::stop() {
  if (stopping_.exchange(true)) return;
  listener_.shutdown();
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<Worker> workers;
  {
    std::lock_guard lock(mu_);
    for (auto& c : conns_) c->shutdown();
    workers.swap(workers_);
  }
  for (auto& w : workers) w.thread.join();
  listener_.reset();
}

void FrameServer::accept_loop() {
  while (!stopping_) {
    int fd = ::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      break;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    auto conn = std::make_shared<Socket>(fd);
    std::lock_guard lock(mu_);
    if (stopping_) break;
    reap_finished();
    conns_.push_back(conn);
    auto done = std::make_shared<std::atomic<bool>>(false);
    workers_.push_back({std::thread([this, conn, done] {
                          serve(conn);
                          done->store(true);
                        }),
                        done});
  }
}

void FrameServer::reap_finished() {
  for (auto it = workers_.begin(); it != workers_.end();) {
    if (it->done->load()) {
      it->thread.join();
      it = workers_.erase(it);
    } else {
      ++it;
    }
  }
}

void FrameServer::serve(const std::shared_ptr<Socket>& conn) {
  auto session = factory_();
  try {
    while (!stopping_) {
      auto req = read_frame(*conn);
      if (!req) break;
      Frame reply = session->handle(*req);
      write_frame(*conn, reply);
    }
  } catch (const std::exception& e) {
    if (!stopping_) spdlog::debug("connection dropped: {}", e.what());
  }
  session.reset();
  std::lock_guard lock(mu_);
  std::erase(conns_, conn);
  conn->shutdown();
}

nlohmann::json FrameClient::call(std::uint8_t opcode, const nlohmann::json& body) {
  std::lock_guard lock(mu_);
  if (!sock_.valid()) sock_ = connect_to(ep_);
  std::optional<Frame> reply;
  try {
    write_frame(sock_, Frame{opcode, body.dump()});
    reply = read_frame(sock_);
  } catch (const Error&) {
    sock_.reset();
    throw;
  }
  if (!reply) {
    sock_.reset();
    throw Error(Errc::IoFail, "server at " + ep_.str() + " closed the connection");
  }
  auto j = nlohmann::json::parse(reply->body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error(Errc::IoFail, "unparsable reply from " + ep_.str());
  if (!j.value("ok", false)) {
    throw Error(errc_from_string(j.value("code", "BAD_REQUEST")), j.value("detail", std::string{}));
  }
  return j;
}

void FrameClient::disconnect() {
  std::lock_guard lock(mu_);
  sock_.reset();
}

nlohmann::json ok_reply(nlohmann::json fields) {
  fields["ok"] = true;
  return fields;
}

nlohmann::json error_reply(std::string_view code, std::string_view detail) {
  return {{"ok", false}, {"code", code}, {"detail", detail}};
}

void write_port_file(const std::string& path, std::uint16_t port) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << port << '\n';
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace vpe::net
