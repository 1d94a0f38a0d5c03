#pragma once

// Module hosting: descriptors and the shared registry, input accumulation for
// multi-input nodes, the processing ledger, node execution and output routing.

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "vpe/flowgraph.hpp"
#include "vpe/metastore.hpp"
#include "vpe/msgbus.hpp"
#include "vpe/processors.hpp"

namespace vpe::io {
class RecordLog;
}

namespace vpe::rt {

using flow::NodeId;

struct ModuleDescriptor {
  std::string module_id;
  std::set<std::string> input_datatypes;
  std::string processor_id;
  /// Recorded for operators; one process serves each module.
  int instance_count = 1;

  std::set<std::string> owned_topics() const;
  bool operator==(const ModuleDescriptor&) const = default;
};

/// "<module_id>-<datatype>". Throws Error{BAD_NAME}.
std::string input_topic_name(std::string_view module_id, std::string_view datatype);
std::string dead_letter_topic(std::string_view module_id);

nlohmann::ordered_json descriptor_to_json(const ModuleDescriptor& d);
/// Throws Error{BAD_PARAM}.
ModuleDescriptor descriptor_from_json(const nlohmann::json& j);

/// Throws Error{BAD_NAME} or Error{BAD_PARAM} for an unusable descriptor.
void check_descriptor(const ModuleDescriptor& d);

/// Known modules. Topic names are compared as whole strings: a descriptor is
/// refused if any of its topics is owned by a different module.
class ModuleRegistry {
 public:
  /// Adds or replaces the descriptor for d.module_id. Throws Error{BAD_NAME}
  /// on a topic collision.
  void put(const ModuleDescriptor& d);
  bool remove(const std::string& module_id);
  std::optional<ModuleDescriptor> find(const std::string& module_id) const;
  std::vector<ModuleDescriptor> all() const;
  std::set<std::string> module_ids() const;

  nlohmann::ordered_json to_json() const;
  static ModuleRegistry from_json(const nlohmann::json& j);
  /// Atomic replace of `path`.
  void save(const std::filesystem::path& path) const;
  /// Empty registry if `path` does not exist.
  static ModuleRegistry load(const std::filesystem::path& path);

 private:
  std::map<std::string, ModuleDescriptor> modules_;
};

using ModuleLookup = std::function<std::optional<ModuleDescriptor>(const std::string& module_id)>;

/// Lookup backed by a registry file that another process rewrites; the file is
/// re-read when its modification time changes.
class RegistryFile {
 public:
  explicit RegistryFile(std::filesystem::path path) : path_(std::move(path)) {}
  std::optional<ModuleDescriptor> find(const std::string& module_id);
  ModuleLookup lookup() {
    return [this](const std::string& id) { return find(id); };
  }

 private:
  std::filesystem::path path_;
  std::mutex mu_;
  std::filesystem::file_time_type seen_{};
  ModuleRegistry cached_;
};

using TaskNode = std::pair<std::string, NodeId>;  // (task_id, node_id)

struct AccumulatorEntry {
  std::string task_id;
  NodeId node_id = 0;
  std::map<NodeId, flow::Payload> arrived;
  std::set<NodeId> required;
  flow::FlowGraph graph;
  std::int64_t first_arrival_time = 0;
};

/// Where a message was read from; entries pin these offsets so the consumer
/// never commits past input that has not been fully handled.
struct BusPosition {
  std::string topic;
  bus::Offset offset = 0;
};

/// Caches partial inputs of nodes until every predecessor has delivered.
/// Thread-safe.
class Accumulator {
 public:
  enum class Outcome {
    Pending,
    /// All inputs present; the entry is now executing and keeps its offsets
    /// pinned until finish() or reopen().
    Ready,
    /// The node already ran (per `already_done`); nothing was stored.
    Done,
  };

  struct Result {
    Outcome outcome = Outcome::Pending;
    proc::Inputs inputs;
  };

  /// Stores td.payload under its producer for (td.task_id, td.nme). An
  /// arrival for an entry that is executing is merged and released with it.
  /// `already_done` is consulted, under the accumulator lock, only when no
  /// entry exists. Throws Error{BAD_PRODUCER}.
  Result accumulate(const flow::TaskData& td, const BusPosition& at, std::int64_t now,
                    const std::function<bool()>& already_done = {});

  /// Drops an executing entry and unpins its offsets.
  void finish(const TaskNode& key);
  /// Returns an executing entry to pending after a failed attempt.
  void reopen(const TaskNode& key);

  /// Lowest offset on `topic` pinned by any entry.
  std::optional<bus::Offset> lowest_pinned(const std::string& topic) const;
  /// Removes pending entries first seen before `cutoff` and returns them.
  std::vector<AccumulatorEntry> evict_older_than(std::int64_t cutoff);

  std::size_t size() const;
  std::optional<AccumulatorEntry> peek(const TaskNode& key) const;

 private:
  struct Slot {
    AccumulatorEntry entry;
    std::multiset<std::pair<std::string, bus::Offset>> pinned;
    bool executing = false;
  };

  mutable std::mutex mu_;
  std::map<TaskNode, Slot> slots_;
};

/// Durable record of executed (task, node) pairs with the outputs each run
/// produced, so a redelivered message after a crash can re-send them instead
/// of running the processor again.
class ProcessingLedger {
 public:
  explicit ProcessingLedger(const std::filesystem::path& path, bool fsync = false);
  ~ProcessingLedger();
  ProcessingLedger(const ProcessingLedger&) = delete;
  ProcessingLedger& operator=(const ProcessingLedger&) = delete;

  bool contains(const TaskNode& key) const;
  std::optional<std::vector<flow::Payload>> outputs(const TaskNode& key) const;
  /// False (and no write) if `key` is already recorded.
  bool record(const TaskNode& key, const std::vector<flow::Payload>& outputs);
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::unique_ptr<io::RecordLog> log_;
  std::map<TaskNode, std::vector<flow::Payload>> done_;
};

struct Execution {
  /// True when the ledger already held the node; `outputs` are the recorded ones.
  bool skipped = false;
  std::vector<flow::Payload> outputs;
};

/// Runs `processor` for `node` unless the ledger already has (task_id,
/// node.id). Outputs are tagged with the node id and written to the ledger
/// before they are returned. Throws Error{EXEC_FAIL}.
Execution execute_node(const std::string& task_id, const flow::FlowNode& node, const proc::Inputs& inputs,
                       proc::Processor& processor, ProcessingLedger& ledger);

struct RoutedMessage {
  std::string topic;
  flow::TaskData td;
};

/// One message per (successor, output payload the successor's module accepts).
/// Throws Error{ROUTE_MISMATCH} or Error{UNKNOWN_MODULE}.
std::vector<RoutedMessage> route_outputs(const flow::TaskData& td, NodeId executed,
                                         const std::vector<flow::Payload>& outputs, const ModuleLookup& lookup);

/// Folds a node's outputs into its stored result: datatype of the first
/// payload ("Empty" if none), records concatenated in order.
store::ResultRecord result_record_of(const std::string& task_id, NodeId node, const std::string& module_id,
                                     const std::vector<flow::Payload>& outputs);

}  // namespace vpe::rt
