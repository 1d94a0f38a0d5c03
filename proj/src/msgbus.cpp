#include "vpe/msgbus.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <fstream>

#include <spdlog/spdlog.h>

#include "fileio.hpp"
#include "vpe/error.hpp"

namespace fs = std::filesystem;

namespace vpe::bus {

using io::get_be;
using io::put_i64;
using io::put_u32;
using io::read_file;
using io::write_all;

struct Broker::TopicLog {
  std::string name;
  std::mutex mu;
  std::condition_variable cv;
  std::vector<BusMessage> messages;
  int fd = -1;
  bool shutdown = false;

  ~TopicLog() {
    if (fd >= 0) ::close(fd);
  }
};

namespace {

constexpr std::size_t kRecordHeader = 16 + 8;

// Parses a topic log, dropping a torn trailing record. Returns the byte length
// of the valid prefix.
std::size_t parse_log(const std::string& data, std::vector<BusMessage>& out) {
  std::size_t pos = 0;
  while (pos + 4 <= data.size()) {
    auto len = static_cast<std::size_t>(get_be(data.data() + pos, 4));
    if (len < kRecordHeader || pos + 4 + len > data.size()) break;
    const char* rec = data.data() + pos + 4;
    std::array<std::uint8_t, 16> key{};
    std::memcpy(key.data(), rec, 16);
    BusMessage m;
    m.offset = static_cast<Offset>(out.size());
    m.key = uuid_from_bytes(key);
    m.enqueue_time = static_cast<std::int64_t>(get_be(rec + 16, 8));
    m.value.assign(rec + kRecordHeader, len - kRecordHeader);
    out.push_back(std::move(m));
    pos += 4 + len;
  }
  return pos;
}

}  // namespace

class LocalConsumer final : public Consumer {
 public:
  LocalConsumer(Broker* broker, std::shared_ptr<Broker::TopicLog> log, std::string group, Offset start)
      : broker_(broker), log_(std::move(log)), group_(std::move(group)), position_(start) {}

  std::vector<BusMessage> poll(std::size_t max_messages, std::chrono::milliseconds timeout) override {
    if (closed_) throw Error(Errc::Closed, "consumer is closed");
    std::unique_lock lock(log_->mu);
    log_->cv.wait_for(lock, timeout, [&] {
      return log_->shutdown || static_cast<Offset>(log_->messages.size()) > position_;
    });
    std::vector<BusMessage> out;
    auto end = static_cast<Offset>(log_->messages.size());
    while (position_ < end && out.size() < max_messages) {
      out.push_back(log_->messages[static_cast<std::size_t>(position_)]);
      ++position_;
    }
    return out;
  }

  void commit(Offset next_offset) override {
    if (closed_) throw Error(Errc::Closed, "consumer is closed");
    broker_->commit_offset(group_, log_->name, next_offset);
  }

  Offset position() const override { return position_; }
  void close() override { closed_ = true; }
  const std::string& topic() const override { return log_->name; }
  const std::string& group() const override { return group_; }

 private:
  Broker* broker_;
  std::shared_ptr<Broker::TopicLog> log_;
  std::string group_;
  Offset position_;
  bool closed_ = false;
};

Broker::Broker(fs::path root, BrokerOptions options) : root_(std::move(root)), options_(options) {
  std::error_code ec;
  fs::create_directories(root_ / "topics", ec);
  fs::create_directories(root_ / "groups", ec);
  if (ec) throw Error(Errc::IoFail, "cannot create bus directory " + root_.string() + ": " + ec.message());
  for (const auto& entry : fs::directory_iterator(root_ / "topics")) {
    if (!entry.is_directory()) continue;
    std::string name = entry.path().filename().string();
    if (!is_token(name)) continue;
    auto log = std::make_shared<TopicLog>();
    log->name = name;
    fs::path file = entry.path() / "log";
    std::string data = read_file(file);
    std::size_t valid = parse_log(data, log->messages);
    log->fd = ::open(file.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (log->fd < 0) io::fail("open " + file.string());
    if (valid != data.size()) {
      spdlog::warn("topic {}: truncating torn tail ({} of {} bytes valid)", name, valid, data.size());
      if (::ftruncate(log->fd, static_cast<off_t>(valid)) != 0) io::fail("truncate " + file.string());
    }
    topics_.emplace(name, std::move(log));
  }
}

Broker::~Broker() { shutdown(); }

void Broker::shutdown() {
  std::shared_lock lock(topics_mu_);
  for (auto& [name, log] : topics_) {
    std::lock_guard l(log->mu);
    log->shutdown = true;
    log->cv.notify_all();
  }
}

void Broker::create_topic(const std::string& name) {
  require_token(name, "topic");
  std::unique_lock lock(topics_mu_);
  if (topics_.contains(name)) return;
  fs::path dir = root_ / "topics" / name;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::IoFail, "cannot create " + dir.string() + ": " + ec.message());
  auto log = std::make_shared<TopicLog>();
  log->name = name;
  fs::path file = dir / "log";
  log->fd = ::open(file.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (log->fd < 0) io::fail("open " + file.string());
  if (options_.fsync) ::fsync(log->fd);
  topics_.emplace(name, std::move(log));
}

std::shared_ptr<Broker::TopicLog> Broker::find(const std::string& topic) {
  std::shared_lock lock(topics_mu_);
  auto it = topics_.find(topic);
  if (it == topics_.end()) throw Error(Errc::NoTopic, "topic '" + topic + "' does not exist");
  return it->second;
}

bool Broker::has_topic(const std::string& topic) {
  std::shared_lock lock(topics_mu_);
  return topics_.contains(topic);
}

std::vector<std::string> Broker::topics() {
  std::shared_lock lock(topics_mu_);
  std::vector<std::string> out;
  for (const auto& [name, log] : topics_) out.push_back(name);
  return out;
}

Offset Broker::publish(const std::string& topic, const std::string& key, const Bytes& value) {
  auto raw_key = uuid_to_bytes(key);
  if (!raw_key) throw Error(Errc::BadName, "message key '" + key + "' is not a UUID");
  auto log = find(topic);
  if (value.size() > net::kMaxFrameBytes) throw Error(Errc::IoFail, "message too large");

  BusMessage m;
  m.key = key;
  m.value = value;
  m.enqueue_time = now_ms();

  std::string rec;
  rec.reserve(4 + kRecordHeader + value.size());
  put_u32(rec, static_cast<std::uint32_t>(kRecordHeader + value.size()));
  rec.append(reinterpret_cast<const char*>(raw_key->data()), raw_key->size());
  put_i64(rec, m.enqueue_time);
  rec += value;

  std::lock_guard lock(log->mu);
  off_t before = ::lseek(log->fd, 0, SEEK_END);
  try {
    write_all(log->fd, rec);
    if (options_.fsync && ::fdatasync(log->fd) != 0) io::fail("fdatasync");
  } catch (...) {
    if (before >= 0 && ::ftruncate(log->fd, before) != 0) spdlog::error("topic {}: cannot roll back partial append", topic);
    throw;
  }
  m.offset = static_cast<Offset>(log->messages.size());
  log->messages.push_back(std::move(m));
  log->cv.notify_all();
  return log->messages.back().offset;
}

Offset Broker::end_offset(const std::string& topic) {
  auto log = find(topic);
  std::lock_guard lock(log->mu);
  return static_cast<Offset>(log->messages.size());
}

Offset Broker::committed(const std::string& group, const std::string& topic) {
  std::lock_guard lock(groups_mu_);
  auto key = std::make_pair(group, topic);
  if (auto it = committed_.find(key); it != committed_.end()) return it->second;
  Offset value = 0;
  std::ifstream in(root_ / "groups" / group / (topic + ".offset"));
  if (in) in >> value;
  committed_[key] = value;
  return value;
}

std::unique_ptr<Consumer> Broker::subscribe(const std::string& topic, const std::string& group) {
  require_token(group, "consumer group");
  auto log = find(topic);
  Offset start = committed(group, topic);
  {
    // A log truncated behind a stale offset file must not leave the group past the end.
    std::lock_guard lock(log->mu);
    start = std::min<Offset>(start, static_cast<Offset>(log->messages.size()));
  }
  return std::make_unique<LocalConsumer>(this, std::move(log), group, start);
}

void Broker::commit_offset(const std::string& group, const std::string& topic, Offset next) {
  Offset end = end_offset(topic);
  if (next < 0 || next > end) {
    throw Error(Errc::BadOffset,
                "offset " + std::to_string(next) + " outside [0, " + std::to_string(end) + "] for topic " + topic);
  }
  std::lock_guard lock(groups_mu_);
  fs::path dir = root_ / "groups" / group;
  std::error_code ec;
  fs::create_directories(dir, ec);
  io::write_file_atomic(dir / (topic + ".offset"), std::to_string(next) + "\n", options_.fsync);
  committed_[{group, topic}] = next;
}

// ---------------------------------------------------------------------------
// TCP protocol

namespace {

using nlohmann::json;

json message_to_json(const BusMessage& m) {
  return {{"offset", m.offset}, {"key", m.key}, {"value", base64_encode(m.value)}, {"enqueue_time", m.enqueue_time}};
}

BusMessage message_from_json(const json& j) {
  BusMessage m;
  m.offset = j.at("offset").get<Offset>();
  m.key = j.at("key").get<std::string>();
  auto value = base64_decode(j.at("value").get<std::string>());
  if (!value) throw Error(Errc::IoFail, "bad message value from broker");
  m.value = std::move(*value);
  m.enqueue_time = j.at("enqueue_time").get<std::int64_t>();
  return m;
}

class BusSession final : public net::Session {
 public:
  explicit BusSession(Broker& broker) : broker_(broker) {}

  net::Frame handle(const net::Frame& req) override {
    json reply;
    try {
      json body = json::parse(req.body);
      reply = dispatch(static_cast<BusOp>(req.opcode), body);
    } catch (const Error& e) {
      reply = net::error_reply(to_string(e.code()), e.detail());
    } catch (const json::exception& e) {
      reply = net::error_reply("BAD_REQUEST", e.what());
    }
    return {req.opcode, reply.dump()};
  }

 private:
  json dispatch(BusOp op, const json& body) {
    switch (op) {
      case BusOp::Create:
        broker_.create_topic(body.at("topic").get<std::string>());
        return net::ok_reply();
      case BusOp::Publish: {
        auto value = base64_decode(body.at("value").get<std::string>());
        if (!value) throw Error(Errc::BadRequest, "value is not base64");
        Offset off = broker_.publish(body.at("topic").get<std::string>(), body.at("key").get<std::string>(), *value);
        return net::ok_reply({{"offset", off}});
      }
      case BusOp::Subscribe: {
        auto consumer = broker_.subscribe(body.at("topic").get<std::string>(), body.at("group").get<std::string>());
        Offset pos = consumer->position();
        int id = next_id_++;
        consumers_[id] = std::move(consumer);
        return net::ok_reply({{"consumer", id}, {"position", pos}});
      }
      case BusOp::Poll: {
        auto& c = consumer(body);
        auto max = body.value("max", std::size_t{1});
        auto timeout = std::chrono::milliseconds(std::clamp<std::int64_t>(body.value("timeout_ms", 0), 0, 30000));
        json messages = json::array();
        for (const auto& m : c.poll(std::max<std::size_t>(max, 1), timeout)) messages.push_back(message_to_json(m));
        return net::ok_reply({{"messages", std::move(messages)}, {"position", c.position()}});
      }
      case BusOp::Commit:
        consumer(body).commit(body.at("next_offset").get<Offset>());
        return net::ok_reply();
      case BusOp::EndOffset:
        return net::ok_reply({{"end", broker_.end_offset(body.at("topic").get<std::string>())}});
    }
    throw Error(Errc::BadRequest, "unknown opcode");
  }

  Consumer& consumer(const json& body) {
    auto it = consumers_.find(body.at("consumer").get<int>());
    if (it == consumers_.end()) throw Error(Errc::Closed, "unknown consumer handle");
    return *it->second;
  }

  Broker& broker_;
  std::map<int, std::unique_ptr<Consumer>> consumers_;
  int next_id_ = 1;
};

class RemoteConsumer final : public Consumer {
 public:
  RemoteConsumer(const Endpoint& ep, std::string topic, std::string group)
      : client_(ep), topic_(std::move(topic)), group_(std::move(group)) {
    auto reply = client_.call(static_cast<std::uint8_t>(BusOp::Subscribe), {{"topic", topic_}, {"group", group_}});
    id_ = reply.at("consumer").get<int>();
    position_ = reply.at("position").get<Offset>();
  }

  std::vector<BusMessage> poll(std::size_t max_messages, std::chrono::milliseconds timeout) override {
    if (closed_) throw Error(Errc::Closed, "consumer is closed");
    auto reply = call(BusOp::Poll, {{"consumer", id_}, {"max", max_messages}, {"timeout_ms", timeout.count()}});
    std::vector<BusMessage> out;
    for (const auto& m : reply.at("messages")) out.push_back(message_from_json(m));
    position_ = reply.at("position").get<Offset>();
    return out;
  }

  void commit(Offset next_offset) override {
    if (closed_) throw Error(Errc::Closed, "consumer is closed");
    call(BusOp::Commit, {{"consumer", id_}, {"next_offset", next_offset}});
  }

  Offset position() const override { return position_; }
  void close() override {
    closed_ = true;
    client_.disconnect();
  }
  const std::string& topic() const override { return topic_; }
  const std::string& group() const override { return group_; }

 private:
  json call(BusOp op, const json& body) {
    try {
      return client_.call(static_cast<std::uint8_t>(op), body);
    } catch (const Error& e) {
      // The server-side handle dies with the connection.
      if (e.code() == Errc::IoFail || e.code() == Errc::Unavailable) close();
      throw;
    }
  }

  net::FrameClient client_;
  std::string topic_;
  std::string group_;
  int id_ = 0;
  Offset position_ = 0;
  bool closed_ = false;
};

}  // namespace

BusServer::BusServer(Broker& broker, std::string host, std::uint16_t port)
    : server_(std::move(host), port, [&broker] { return std::make_unique<BusSession>(broker); }) {}

void RemoteBus::create_topic(const std::string& name) {
  client_.call(static_cast<std::uint8_t>(BusOp::Create), {{"topic", name}});
}

Offset RemoteBus::publish(const std::string& topic, const std::string& key, const Bytes& value) {
  auto reply = client_.call(static_cast<std::uint8_t>(BusOp::Publish),
                            {{"topic", topic}, {"key", key}, {"value", base64_encode(value)}});
  return reply.at("offset").get<Offset>();
}

std::unique_ptr<Consumer> RemoteBus::subscribe(const std::string& topic, const std::string& group) {
  return std::make_unique<RemoteConsumer>(ep_, topic, group);
}

Offset RemoteBus::end_offset(const std::string& topic) {
  return client_.call(static_cast<std::uint8_t>(BusOp::EndOffset), {{"topic", topic}}).at("end").get<Offset>();
}

bool RemoteBus::has_topic(const std::string& topic) {
  try {
    end_offset(topic);
    return true;
  } catch (const Error& e) {
    if (e.code() == Errc::NoTopic) return false;
    throw;
  }
}

}  // namespace vpe::bus
