#pragma once

// Durable publish-subscribe bus: named single-partition topics holding
// append-only offset-ordered logs, and consumer groups with committed offsets.
//
// On disk (root = VPE_BUS_DIR):
//   <root>/topics/<name>/log             u32be length, then 16-byte key,
//                                        i64be enqueue_time, value
//   <root>/groups/<group>/<topic>.offset decimal next-offset-to-read
//
// Broker is the in-process implementation; RemoteBus speaks the TCP protocol
// served by BusServer. Both implement Bus.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include "vpe/common.hpp"
#include "vpe/net.hpp"

namespace vpe::bus {

using Offset = std::int64_t;

struct BusMessage {
  Offset offset = 0;
  std::string key;  // task UUID
  Bytes value;
  std::int64_t enqueue_time = 0;

  bool operator==(const BusMessage&) const = default;
};

/// Positioned reader of one topic on behalf of one consumer group. poll and
/// commit on the same handle must not be called concurrently.
class Consumer {
 public:
  virtual ~Consumer() = default;

  /// Up to `max_messages` in offset order from the current position, waiting
  /// up to `timeout` for the first one. Advances the in-memory position only.
  virtual std::vector<BusMessage> poll(std::size_t max_messages, std::chrono::milliseconds timeout) = 0;
  /// Durably records `next_offset` as the group's position on this topic.
  virtual void commit(Offset next_offset) = 0;
  virtual Offset position() const = 0;
  virtual void close() = 0;

  virtual const std::string& topic() const = 0;
  virtual const std::string& group() const = 0;
};

class Bus {
 public:
  virtual ~Bus() = default;

  /// Idempotent. Throws Error{BAD_NAME}.
  virtual void create_topic(const std::string& name) = 0;
  /// Returns the new message's offset once it is on disk. Throws
  /// Error{NO_TOPIC}, Error{IO_FAIL}, or Error{BAD_NAME} for a non-UUID key.
  virtual Offset publish(const std::string& topic, const std::string& key, const Bytes& value) = 0;
  /// Consumer starts at the group's committed offset (0 for a new group).
  virtual std::unique_ptr<Consumer> subscribe(const std::string& topic, const std::string& group) = 0;
  /// Current log length. Throws Error{NO_TOPIC}.
  virtual Offset end_offset(const std::string& topic) = 0;
  virtual bool has_topic(const std::string& topic) = 0;
};

struct BrokerOptions {
  /// fdatasync appends and offset files. Writes reach the page cache before
  /// publish returns either way, which already survives a process kill.
  bool fsync = false;
};

class Broker final : public Bus {
 public:
  explicit Broker(std::filesystem::path root, BrokerOptions options = {});
  ~Broker() override;
  Broker(const Broker&) = delete;
  Broker& operator=(const Broker&) = delete;

  void create_topic(const std::string& name) override;
  Offset publish(const std::string& topic, const std::string& key, const Bytes& value) override;
  std::unique_ptr<Consumer> subscribe(const std::string& topic, const std::string& group) override;
  Offset end_offset(const std::string& topic) override;
  bool has_topic(const std::string& topic) override;

  std::vector<std::string> topics();
  Offset committed(const std::string& group, const std::string& topic);
  const std::filesystem::path& root() const noexcept { return root_; }

  /// Wakes every blocked poll; subsequent polls return immediately.
  void shutdown();

  struct TopicLog;

 private:
  friend class LocalConsumer;
  std::shared_ptr<TopicLog> find(const std::string& topic);
  void commit_offset(const std::string& group, const std::string& topic, Offset next);

  std::filesystem::path root_;
  BrokerOptions options_;
  std::shared_mutex topics_mu_;
  std::map<std::string, std::shared_ptr<TopicLog>> topics_;
  std::mutex groups_mu_;
  std::map<std::pair<std::string, std::string>, Offset> committed_;
};

/// Opcodes of the bus wire protocol.
enum class BusOp : std::uint8_t { Create = 1, Publish = 2, Subscribe = 3, Poll = 4, Commit = 5, EndOffset = 6 };

class BusServer {
 public:
  BusServer(Broker& broker, std::string host, std::uint16_t port);
  std::uint16_t port() const noexcept { return server_.port(); }
  void stop() { server_.stop(); }

 private:
  net::FrameServer server_;
};

class RemoteBus final : public Bus {
 public:
  explicit RemoteBus(Endpoint ep) : ep_(ep), client_(std::move(ep)) {}

  void create_topic(const std::string& name) override;
  Offset publish(const std::string& topic, const std::string& key, const Bytes& value) override;
  std::unique_ptr<Consumer> subscribe(const std::string& topic, const std::string& group) override;
  Offset end_offset(const std::string& topic) override;
  bool has_topic(const std::string& topic) override;

 private:
  Endpoint ep_;
  net::FrameClient client_;
};

}  // namespace vpe::bus
