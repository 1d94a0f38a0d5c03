#pragma once

// Launching and terminating module processes.
//
// The launcher keeps the module registry (<state_dir>/registry.json), writes
// one config file per module (<state_dir>/modules/<id>.conf) and runs each
// module as `<executable> module run --config <file>`. Children that die
// without being asked to are started again.

#include <sys/types.h>

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "vpe/net.hpp"
#include "vpe/runner.hpp"
#include "vpe/runtime.hpp"

namespace vpe::rt {

/// Contents of a module config file: key=value lines.
struct ModuleConfig {
  ModuleDescriptor descriptor;
  Endpoint bus;
  Endpoint store;
  std::filesystem::path registry;
  std::filesystem::path ledger;
  /// While this file exists and names a stage, the module kills itself there.
  std::filesystem::path fault_file;

  std::string to_text() const;
  /// Throws Error{BAD_PARAM}.
  static ModuleConfig parse(std::string_view text);
  static ModuleConfig read(const std::filesystem::path& path);
};

/// Hosts one module until SIGTERM/SIGINT: creates the runner against the
/// remote bus and store and wires the fault file and VPE_FAULT_POINT into its
/// stage hook. Returns the process exit code.
int run_module_process(const ModuleConfig& config);

struct ModuleStatus {
  ModuleDescriptor descriptor;
  bool running = false;
  int pid = 0;
  int restarts = 0;
};

nlohmann::ordered_json status_to_json(const ModuleStatus& s);
ModuleStatus status_from_json(const nlohmann::json& j);

/// Read access to the registered modules and their process state.
class ModuleDirectory {
 public:
  virtual ~ModuleDirectory() = default;
  virtual std::vector<ModuleStatus> list() = 0;
};

struct LauncherOptions {
  std::filesystem::path state_dir;
  /// Binary that implements `module run`.
  std::string executable;
  Endpoint bus;
  Endpoint store;
  bool auto_restart = true;
  std::chrono::milliseconds stop_deadline{5000};
  std::chrono::milliseconds restart_delay{100};
};

class Launcher final : public ModuleDirectory {
 public:
  explicit Launcher(LauncherOptions options);
  /// Terminates every running module.
  ~Launcher() override;
  Launcher(const Launcher&) = delete;
  Launcher& operator=(const Launcher&) = delete;

  /// Registers (or replaces) the descriptor, creates its topics and starts
  /// the process. Throws Error{ALREADY_RUNNING}, or Error{BAD_NAME} on a topic
  /// collision with another module.
  void launch(const ModuleDescriptor& d);
  /// Starts an already registered module again. Throws Error{NOT_FOUND}.
  void launch(const std::string& module_id);
  /// SIGTERM, then SIGKILL after the stop deadline. The module stays
  /// registered. Throws Error{NOT_RUNNING}.
  void terminate(const std::string& module_id);
  /// Without a stage: SIGKILL now. With one: the module kills itself the next
  /// time it reaches that stage. Either way it is restarted afterwards.
  /// Throws Error{NOT_RUNNING}.
  void fault(const std::string& module_id, std::optional<Stage> at);
  std::vector<ModuleStatus> list() override;

 private:
  struct Child {
    ModuleDescriptor descriptor;
    pid_t pid = -1;
    bool wanted = false;
    bool spawn_pending = false;
    int restarts = 0;
    int failures = 0;  // consecutive nonzero exits
    std::chrono::steady_clock::time_point start_at{};
    std::string spawn_error;
  };

  void start(const ModuleDescriptor& d, std::unique_lock<std::mutex>& lock);
  void supervise();
  void spawn(Child& child);
  void reap(Child& child, int status);
  std::filesystem::path config_path(const std::string& module_id) const;
  std::filesystem::path fault_path(const std::string& module_id) const;

  LauncherOptions options_;
  std::mutex mu_;
  std::condition_variable cv_;
  ModuleRegistry registry_;
  std::map<std::string, Child> children_;
  bool stopping_ = false;
  std::thread supervisor_;
};

enum class LauncherOp : std::uint8_t { Launch = 1, Terminate = 2, List = 3, Fault = 4 };

class LauncherServer {
 public:
  LauncherServer(Launcher& launcher, std::string host, std::uint16_t port);
  std::uint16_t port() const noexcept { return server_.port(); }
  void stop() { server_.stop(); }

 private:
  net::FrameServer server_;
};

class LauncherClient final : public ModuleDirectory {
 public:
  explicit LauncherClient(Endpoint ep) : client_(std::move(ep)) {}

  void launch(const ModuleDescriptor& d);
  void launch(const std::string& module_id);
  void terminate(const std::string& module_id);
  void fault(const std::string& module_id, std::optional<Stage> at);
  std::vector<ModuleStatus> list() override;

 private:
  net::FrameClient client_;
};

}  // namespace vpe::rt
