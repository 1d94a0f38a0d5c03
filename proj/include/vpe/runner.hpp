#pragma once

// The per-module consume loop: one thread per owned topic running
//   poll -> reorganize -> for each message: decode, locate_self, accumulate,
//   execute, persist result, route, publish -> commit.

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "vpe/runtime.hpp"

namespace vpe::rt {

/// Points in the loop where a debug fault may fire.
enum class Stage { AfterPoll, AfterExecute, AfterPublish };

std::string to_string(Stage stage);
/// "after-poll", "after-execute", "after-publish"; nullopt otherwise.
std::optional<Stage> stage_from_string(std::string_view text);

/// Instrumentation callbacks; may be invoked from several loop threads.
class RunnerObserver {
 public:
  virtual ~RunnerObserver() = default;
  virtual void on_arrival(const flow::TaskData& /*td*/) {}
  virtual void on_execute(const std::string& /*task_id*/, NodeId /*node*/, const proc::Inputs& /*inputs*/) {}
  /// A ledger hit whose recorded outputs are being sent again.
  virtual void on_resend(const std::string& /*task_id*/, NodeId /*node*/) {}
  virtual void on_publish(const std::string& /*topic*/, const flow::TaskData& /*td*/) {}
  virtual void on_dead_letter(const std::string& /*topic*/, bus::Offset /*offset*/, const std::string& /*reason*/) {}
  virtual void on_stalled(const AccumulatorEntry& /*entry*/) {}
};

struct RunnerOptions {
  std::size_t batch_size = 64;
  std::chrono::milliseconds poll_timeout{200};
  /// Pending accumulator entries older than this are dropped as stalled.
  std::chrono::milliseconds accumulator_ttl{std::chrono::hours(1)};
  /// Failed executions of one (task, node) before its message is dead-lettered.
  int max_exec_attempts = 5;
  std::chrono::milliseconds retry_backoff{100};
  /// Optional regrouping of each polled batch; identity when unset.
  std::function<std::vector<bus::BusMessage>(std::vector<bus::BusMessage>)> reorganize;
  /// Called at each stage boundary; used for fault injection.
  std::function<void(Stage)> on_stage;
  RunnerObserver* observer = nullptr;
};

class ModuleRunner {
 public:
  /// `ledger` must outlive the runner. Owned topics and the dead-letter topic
  /// are created if missing. Throws Error{BAD_PARAM} if the processor does not
  /// accept every datatype the module is subscribed to.
  ModuleRunner(ModuleDescriptor descriptor, bus::Bus& bus, store::Store& store,
               std::shared_ptr<proc::Processor> processor, ModuleLookup lookup, ProcessingLedger& ledger,
               RunnerOptions options = {});
  ~ModuleRunner();
  ModuleRunner(const ModuleRunner&) = delete;
  ModuleRunner& operator=(const ModuleRunner&) = delete;

  /// Starts one loop thread per owned topic.
  void start();
  /// Lets each loop finish its current batch and commit, then joins them.
  void stop();
  /// start() then block until stop() is called from elsewhere.
  void run();

  const ModuleDescriptor& descriptor() const noexcept { return descriptor_; }
  const Accumulator& accumulator() const noexcept { return accumulator_; }

 private:
  void loop(const std::string& topic);
  void handle(const bus::BusMessage& m, const std::string& topic);
  void emit(const flow::TaskData& td, const flow::FlowNode& node, const std::vector<flow::Payload>& outputs);
  void publish(const std::string& topic, const std::string& key, const Bytes& value);
  void dead_letter(const bus::BusMessage& m, const std::string& topic, const std::string& reason);
  void stage(Stage s);

  ModuleDescriptor descriptor_;
  bus::Bus& bus_;
  store::Store& store_;
  std::shared_ptr<proc::Processor> processor_;
  ModuleLookup lookup_;
  ProcessingLedger& ledger_;
  RunnerOptions options_;

  Accumulator accumulator_;
  std::mutex exec_mu_;  // held around process() for single-threaded processors
  std::mutex attempts_mu_;
  std::map<TaskNode, int> attempts_;
  std::mutex topics_mu_;
  std::set<std::string> known_topics_;

  std::atomic<bool> stopping_{false};
  std::mutex run_mu_;
  std::condition_variable run_cv_;
  std::vector<std::thread> loops_;
};

}  // namespace vpe::rt
