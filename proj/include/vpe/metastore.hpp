#pragma once

// Durable results and feedback store.
//
// MetaStore keeps one append-only log (<dir>/store.log) of length-prefixed
// JSON records and rebuilds an in-memory index from it on open. A torn
// trailing record left by a crash is cut off. RemoteStore speaks the TCP
// protocol served by StoreServer; both implement Store.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"
#include "vpe/flowgraph.hpp"
#include "vpe/net.hpp"

namespace vpe::io {
class RecordLog;
}

namespace vpe::store {

struct ResultRecord {
  std::string task_id;
  flow::NodeId node_id = 0;
  std::string module_id;
  std::string datatype;
  std::vector<Bytes> records;
  std::int64_t created_at = 0;

  bool operator==(const ResultRecord&) const = default;
};

enum class FeedbackKind { Satisfaction, Selection, Revision };

struct FeedbackRecord {
  std::string feedback_id;
  std::string task_id;
  flow::NodeId node_id = 0;
  FeedbackKind kind = FeedbackKind::Satisfaction;
  std::optional<int> satisfaction;
  std::optional<std::vector<int>> selected_record_indices;
  std::optional<Bytes> revision;
  std::int64_t created_at = 0;

  bool operator==(const FeedbackRecord&) const = default;
};

struct FeedbackFilter {
  std::optional<std::string> module_id;
  std::optional<FeedbackKind> kind;
  /// Only records with created_at >= since.
  std::optional<std::int64_t> since;
};

/// Graph of a submitted task, kept so status can list nodes that have no
/// result yet.
struct TaskRecord {
  std::string task_id;
  flow::FlowGraph graph;
  std::int64_t created_at = 0;

  bool operator==(const TaskRecord&) const = default;
};

enum class SaveOutcome { Stored, Duplicate };

class Store {
 public:
  virtual ~Store() = default;

  /// First write per (task_id, node_id) wins. Throws Error{IO_FAIL}, or
  /// Error{BAD_PARAM} for a malformed record.
  virtual SaveOutcome save_result(const ResultRecord& r) = 0;
  /// Sorted by node_id; empty for an unknown task.
  virtual std::vector<ResultRecord> query_results(const std::string& task_id,
                                                  std::optional<flow::NodeId> node = std::nullopt) = 0;
  /// Fills feedback_id and created_at when left empty and returns the stored
  /// record. Throws Error{NO_RESULT}, Error{BAD_INDEX}, or Error{BAD_PARAM}
  /// when the fields do not match `kind`.
  virtual FeedbackRecord save_feedback(FeedbackRecord f) = 0;
  /// Sorted by created_at, ties in save order.
  virtual std::vector<FeedbackRecord> export_feedback(const FeedbackFilter& filter) = 0;
  /// Idempotent per task_id (first write wins).
  virtual void save_task(const TaskRecord& t) = 0;
  virtual std::optional<TaskRecord> get_task(const std::string& task_id) = 0;
};

std::string to_string(FeedbackKind kind);
/// Throws Error{BAD_PARAM}.
FeedbackKind feedback_kind_from_string(std::string_view text);

// JSON forms used on the wire, in the store log and in exports. Byte strings
// (records, revision) are base64. The readers throw Error{BAD_PARAM}.
nlohmann::ordered_json result_to_json(const ResultRecord& r);
ResultRecord result_from_json(const nlohmann::json& j);
nlohmann::ordered_json feedback_to_json(const FeedbackRecord& f);
FeedbackRecord feedback_from_json(const nlohmann::json& j);
nlohmann::ordered_json task_to_json(const TaskRecord& t);
TaskRecord task_from_json(const nlohmann::json& j);

struct MetaStoreOptions {
  bool fsync = false;
};

class MetaStore final : public Store {
 public:
  explicit MetaStore(std::filesystem::path dir, MetaStoreOptions options = {});
  ~MetaStore() override;
  MetaStore(const MetaStore&) = delete;
  MetaStore& operator=(const MetaStore&) = delete;

  SaveOutcome save_result(const ResultRecord& r) override;
  std::vector<ResultRecord> query_results(const std::string& task_id,
                                          std::optional<flow::NodeId> node = std::nullopt) override;
  FeedbackRecord save_feedback(FeedbackRecord f) override;
  std::vector<FeedbackRecord> export_feedback(const FeedbackFilter& filter) override;
  void save_task(const TaskRecord& t) override;
  std::optional<TaskRecord> get_task(const std::string& task_id) override;

 private:
  void append(const nlohmann::ordered_json& entry);
  void apply(const nlohmann::json& entry);

  std::filesystem::path dir_;
  MetaStoreOptions options_;
  std::unique_ptr<io::RecordLog> log_;
  std::shared_mutex mu_;
  std::map<std::pair<std::string, flow::NodeId>, ResultRecord> results_;
  std::vector<FeedbackRecord> feedback_;
  std::map<std::string, TaskRecord> tasks_;
};

enum class StoreOp : std::uint8_t {
  SaveResult = 1,
  Query = 2,
  SaveFeedback = 3,
  Export = 4,
  SaveTask = 5,
  GetTask = 6,
};

class StoreServer {
 public:
  StoreServer(Store& store, std::string host, std::uint16_t port);
  std::uint16_t port() const noexcept { return server_.port(); }
  void stop() { server_.stop(); }

 private:
  net::FrameServer server_;
};

class RemoteStore final : public Store {
 public:
  explicit RemoteStore(Endpoint ep) : client_(std::move(ep)) {}

  SaveOutcome save_result(const ResultRecord& r) override;
  std::vector<ResultRecord> query_results(const std::string& task_id,
                                          std::optional<flow::NodeId> node = std::nullopt) override;
  FeedbackRecord save_feedback(FeedbackRecord f) override;
  std::vector<FeedbackRecord> export_feedback(const FeedbackFilter& filter) override;
  void save_task(const TaskRecord& t) override;
  std::optional<TaskRecord> get_task(const std::string& task_id) override;

 private:
  net::FrameClient client_;
};

}  // namespace vpe::store
