#include "vpe/launcher.hpp"

#include <fcntl.h>
#include <pthread.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <csignal>
#include <cstring>
#include <cstdlib>
#include <sstream>

#include <spdlog/spdlog.h>

#include "fileio.hpp"
#include "vpe/error.hpp"
#include "vpe/metastore.hpp"
#include "vpe/msgbus.hpp"
#include "vpe/processors.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

namespace vpe::rt {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

std::set<std::string> split_list(std::string_view s) {
  std::set<std::string> out;
  while (!s.empty()) {
    auto comma = s.find(',');
    auto item = trim(s.substr(0, comma));
    if (!item.empty()) out.emplace(item);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace

std::string ModuleConfig::to_text() const {
  std::string datatypes;
  for (const auto& d : descriptor.input_datatypes) {
    if (!datatypes.empty()) datatypes += ',';
    datatypes += d;
  }
  std::ostringstream out;
  out << "module_id=" << descriptor.module_id << '\n'
      << "datatypes=" << datatypes << '\n'
      << "processor_id=" << descriptor.processor_id << '\n'
      << "instance_count=" << descriptor.instance_count << '\n'
      << "bus=" << bus.str() << '\n'
      << "store=" << store.str() << '\n'
      << "registry=" << registry.string() << '\n'
      << "ledger=" << ledger.string() << '\n'
      << "fault_file=" << fault_file.string() << '\n';
  return out.str();
}

ModuleConfig ModuleConfig::parse(std::string_view text) {
  ModuleConfig c;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    auto nl = text.find('\n');
    auto line = trim(text.substr(0, nl));
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(Errc::BadParam, "config line " + std::to_string(line_no) + " has no '='");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    seen.insert(key);
    try {
      if (key == "module_id") {
        c.descriptor.module_id = value;
      } else if (key == "datatypes") {
        c.descriptor.input_datatypes = split_list(value);
      } else if (key == "processor_id") {
        c.descriptor.processor_id = value;
      } else if (key == "instance_count") {
        c.descriptor.instance_count = std::stoi(value);
      } else if (key == "bus") {
        c.bus = Endpoint::parse(value);
      } else if (key == "store") {
        c.store = Endpoint::parse(value);
      } else if (key == "registry") {
        c.registry = value;
      } else if (key == "ledger") {
        c.ledger = value;
      } else if (key == "fault_file") {
        c.fault_file = value;
      } else {
        throw Error(Errc::BadParam, "unknown config key " + key);
      }
    } catch (const std::logic_error& e) {
      throw Error(Errc::BadParam, "config key " + key + ": " + e.what());
    }
  }
  for (const char* required : {"module_id", "datatypes", "processor_id", "bus", "store", "ledger"}) {
    if (!seen.contains(required)) throw Error(Errc::BadParam, std::string("config is missing ") + required);
  }
  check_descriptor(c.descriptor);
  return c;
}

ModuleConfig ModuleConfig::read(const fs::path& path) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(Errc::IoFail, "cannot read config " + path.string());
  return parse(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Module process

namespace {

[[noreturn]] void die_here(const std::string& module_id, Stage s) {
  spdlog::warn("{}: fault fired at {}", module_id, to_string(s));
  spdlog::default_logger()->flush();
  ::kill(::getpid(), SIGKILL);
  std::abort();
}

}  // namespace

int run_module_process(const ModuleConfig& config) {
  // Block the stop signals before any thread exists so sigwait sees them.
  sigset_t stop_signals;
  sigemptyset(&stop_signals);
  sigaddset(&stop_signals, SIGTERM);
  sigaddset(&stop_signals, SIGINT);
  pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

  const auto& d = config.descriptor;
  std::optional<Stage> env_fault;
  if (const char* fp = std::getenv("VPE_FAULT_POINT"); fp && *fp) {
    env_fault = stage_from_string(fp);
    if (!env_fault) {
      spdlog::error("{}: VPE_FAULT_POINT={} is not a stage", d.module_id, fp);
      return 2;
    }
  }
  std::atomic<bool> env_armed{env_fault.has_value()};

  RunnerOptions options;
  options.on_stage = [&](Stage s) {
    if (env_fault == s && env_armed.exchange(false)) die_here(d.module_id, s);
    if (config.fault_file.empty() || ::access(config.fault_file.c_str(), F_OK) != 0) return;
    std::string armed(trim(io::read_file(config.fault_file)));
    if (stage_from_string(armed) != s) return;
    std::error_code ec;
    if (fs::remove(config.fault_file, ec)) die_here(d.module_id, s);
  };

  try {
    auto processor = proc::ProcessorRegistry::builtin().get(d.processor_id);
    bus::RemoteBus bus(config.bus);
    store::RemoteStore store(config.store);
    std::unique_ptr<RegistryFile> registry;
    ModuleLookup lookup;
    if (!config.registry.empty()) {
      registry = std::make_unique<RegistryFile>(config.registry);
      lookup = registry->lookup();
    } else {
      lookup = [](const std::string&) { return std::optional<ModuleDescriptor>(); };
    }
    if (config.ledger.has_parent_path()) fs::create_directories(config.ledger.parent_path());
    ProcessingLedger ledger(config.ledger);
    ModuleRunner runner(d, bus, store, processor, lookup, ledger, options);
    runner.start();
    spdlog::info("{}: running processor {} against bus {}", d.module_id, d.processor_id, config.bus.str());

    int sig = 0;
    sigwait(&stop_signals, &sig);
    spdlog::info("{}: signal {}, stopping", d.module_id, sig);
    runner.stop();
    return 0;
  } catch (const Error& e) {
    spdlog::error("{}: {}", d.module_id, e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}: {}", d.module_id, e.what());
    return 1;
  }
}

// ---------------------------------------------------------------------------
// Status

ordered_json status_to_json(const ModuleStatus& s) {
  auto j = descriptor_to_json(s.descriptor);
  j["running"] = s.running;
  j["pid"] = s.pid;
  j["restarts"] = s.restarts;
  return j;
}

ModuleStatus status_from_json(const json& j) {
  ModuleStatus s;
  s.descriptor = descriptor_from_json(j);
  s.running = j.value("running", false);
  s.pid = j.value("pid", 0);
  s.restarts = j.value("restarts", 0);
  return s;
}

// ---------------------------------------------------------------------------
// Launcher

Launcher::Launcher(LauncherOptions options) : options_(std::move(options)) {
  for (const char* sub : {"modules", "faults", "ledgers", "logs"}) fs::create_directories(options_.state_dir / sub);
  registry_ = ModuleRegistry::load(options_.state_dir / "registry.json");
  supervisor_ = std::thread([this] { supervise(); });
}

Launcher::~Launcher() {
  std::unique_lock lock(mu_);
  for (auto& [id, c] : children_) {
    c.wanted = false;
    c.spawn_pending = false;
    if (c.pid > 0) ::kill(c.pid, SIGTERM);
  }
  auto all_gone = [&] {
    for (const auto& [id, c] : children_) {
      if (c.pid > 0) return false;
    }
    return true;
  };
  if (!cv_.wait_for(lock, options_.stop_deadline, all_gone)) {
    for (auto& [id, c] : children_) {
      if (c.pid > 0) ::kill(c.pid, SIGKILL);
    }
    cv_.wait(lock, all_gone);
  }
  stopping_ = true;
  cv_.notify_all();
  lock.unlock();
  supervisor_.join();
}

fs::path Launcher::config_path(const std::string& module_id) const {
  return options_.state_dir / "modules" / (module_id + ".conf");
}

fs::path Launcher::fault_path(const std::string& module_id) const {
  return options_.state_dir / "faults" / module_id;
}

void Launcher::launch(const ModuleDescriptor& d) {
  check_descriptor(d);
  auto processors = proc::ProcessorRegistry::builtin();
  if (!processors.contains(d.processor_id)) throw Error(Errc::NotFound, "no processor " + d.processor_id);
  const auto& accepts = processors.get(d.processor_id)->contract().accepts;
  for (const auto& t : d.input_datatypes) {
    if (!accepts.contains(t)) throw Error(Errc::BadParam, "processor " + d.processor_id + " does not accept " + t);
  }
  std::unique_lock lock(mu_);
  start(d, lock);
}

void Launcher::launch(const std::string& module_id) {
  std::unique_lock lock(mu_);
  auto d = registry_.find(module_id);
  if (!d) throw Error(Errc::NotFound, "module " + module_id + " is not registered");
  start(*d, lock);
}

void Launcher::start(const ModuleDescriptor& d, std::unique_lock<std::mutex>& lock) {
  if (auto it = children_.find(d.module_id); it != children_.end() && it->second.wanted) {
    throw Error(Errc::AlreadyRunning, "module " + d.module_id + " is already running");
  }
  auto next = registry_;
  next.put(d);

  bus::RemoteBus bus(options_.bus);
  for (const auto& t : d.owned_topics()) bus.create_topic(t);
  bus.create_topic(dead_letter_topic(d.module_id));

  ModuleConfig config;
  config.descriptor = d;
  config.bus = options_.bus;
  config.store = options_.store;
  config.registry = options_.state_dir / "registry.json";
  config.ledger = options_.state_dir / "ledgers" / (d.module_id + ".ledger");
  config.fault_file = fault_path(d.module_id);
  io::write_file_atomic(config_path(d.module_id), config.to_text(), false);
  next.save(config.registry);
  registry_ = std::move(next);
  std::error_code ec;
  fs::remove(config.fault_file, ec);

  Child& c = children_[d.module_id];
  c.descriptor = d;
  c.wanted = true;
  c.spawn_pending = true;
  c.start_at = Clock::now();
  c.spawn_error.clear();
  cv_.notify_all();
  cv_.wait(lock, [&] { return !c.spawn_pending || stopping_; });
  if (!c.spawn_error.empty()) {
    c.wanted = false;
    throw Error(Errc::IoFail, "cannot start " + d.module_id + ": " + c.spawn_error);
  }
  spdlog::info("launched {} (pid {})", d.module_id, c.pid);
}

void Launcher::terminate(const std::string& module_id) {
  std::unique_lock lock(mu_);
  auto it = children_.find(module_id);
  if (it == children_.end() || !it->second.wanted) {
    throw Error(Errc::NotRunning, "module " + module_id + " is not running");
  }
  Child& c = it->second;
  c.wanted = false;
  c.spawn_pending = false;
  if (c.pid <= 0) return;
  const pid_t pid = c.pid;
  ::kill(pid, SIGTERM);
  if (!cv_.wait_for(lock, options_.stop_deadline, [&] { return c.pid != pid; })) {
    spdlog::warn("{} did not stop within {} ms; killing", module_id, options_.stop_deadline.count());
    ::kill(pid, SIGKILL);
    cv_.wait(lock, [&] { return c.pid != pid; });
  }
  spdlog::info("terminated {}", module_id);
}

void Launcher::fault(const std::string& module_id, std::optional<Stage> at) {
  std::lock_guard lock(mu_);
  auto it = children_.find(module_id);
  if (it == children_.end() || !it->second.wanted) {
    throw Error(Errc::NotRunning, "module " + module_id + " is not running");
  }
  if (at) {
    io::write_file_atomic(fault_path(module_id), to_string(*at) + "\n", false);
    spdlog::info("armed fault for {} at {}", module_id, to_string(*at));
    return;
  }
  if (it->second.pid > 0) {
    ::kill(it->second.pid, SIGKILL);
    spdlog::info("killed {} (pid {})", module_id, it->second.pid);
  }
}

std::vector<ModuleStatus> Launcher::list() {
  std::lock_guard lock(mu_);
  std::vector<ModuleStatus> out;
  for (const auto& d : registry_.all()) {
    ModuleStatus s;
    s.descriptor = d;
    if (auto it = children_.find(d.module_id); it != children_.end()) {
      s.running = it->second.wanted && it->second.pid > 0;
      s.pid = s.running ? it->second.pid : 0;
      s.restarts = it->second.restarts;
    }
    out.push_back(std::move(s));
  }
  return out;
}

void Launcher::supervise() {
  std::unique_lock lock(mu_);
  while (!stopping_) {
    for (auto& [id, c] : children_) {
      if (c.pid > 0) {
        int status = 0;
        if (::waitpid(c.pid, &status, WNOHANG) == c.pid) reap(c, status);
      }
      if (c.pid <= 0 && c.wanted && c.spawn_pending && Clock::now() >= c.start_at) {
        spawn(c);
        c.spawn_pending = false;
        cv_.notify_all();
      }
    }
    cv_.wait_for(lock, std::chrono::milliseconds(10));
  }
}

void Launcher::reap(Child& c, int status) {
  const auto& id = c.descriptor.module_id;
  if (WIFSIGNALED(status)) {
    spdlog::info("{} (pid {}) killed by signal {}", id, c.pid, WTERMSIG(status));
  } else {
    spdlog::info("{} (pid {}) exited with {}", id, c.pid, WEXITSTATUS(status));
  }
  c.pid = -1;
  if (c.wanted && options_.auto_restart) {
    // A module that keeps exiting on its own (bad config, services down) is
    // retried with a growing delay; signals restart it at the base delay.
    auto delay = options_.restart_delay;
    if (WIFEXITED(status) && WEXITSTATUS(status) != 0) {
      ++c.failures;
      delay *= 1 << std::min(c.failures, 6);
    } else {
      c.failures = 0;
    }
    c.spawn_pending = true;
    c.start_at = Clock::now() + std::min<std::chrono::milliseconds>(delay, std::chrono::seconds(5));
    ++c.restarts;
  } else {
    c.wanted = false;
  }
  cv_.notify_all();
}

void Launcher::spawn(Child& c) {
  const auto& id = c.descriptor.module_id;
  std::string config = config_path(id).string();
  std::vector<std::string> args{options_.executable, "module", "run", "--config", config};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  std::vector<char*> envp;
  for (char** e = environ; *e; ++e) {
    if (std::string_view(*e).rfind("VPE_FAULT_POINT=", 0) != 0) envp.push_back(*e);
  }
  envp.push_back(nullptr);

  std::string log_path = (options_.state_dir / "logs" / (id + ".log")).string();
  int log_fd = ::open(log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (log_fd < 0) {
    c.spawn_error = "open " + log_path + ": " + std::strerror(errno);
    return;
  }
  const pid_t parent = ::getpid();
  // Signals stay blocked until the child has dropped the parent's handlers,
  // so a stop request that races the exec still terminates it.
  sigset_t all, saved;
  sigfillset(&all);
  pthread_sigmask(SIG_SETMASK, &all, &saved);
  pid_t pid = ::fork();
  if (pid == 0) {
    for (int sig = 1; sig < NSIG; ++sig) ::signal(sig, SIG_DFL);
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (::getppid() != parent) ::_exit(1);
    ::dup2(log_fd, STDOUT_FILENO);
    ::dup2(log_fd, STDERR_FILENO);
    int null_fd = ::open("/dev/null", O_RDONLY);
    if (null_fd >= 0) ::dup2(null_fd, STDIN_FILENO);
    sigset_t none;
    sigemptyset(&none);
    ::sigprocmask(SIG_SETMASK, &none, nullptr);
    ::execve(argv[0], argv.data(), envp.data());
    ::_exit(127);
  }
  pthread_sigmask(SIG_SETMASK, &saved, nullptr);
  ::close(log_fd);
  if (pid < 0) {
    c.spawn_error = std::string("fork: ") + std::strerror(errno);
    return;
  }
  c.pid = pid;
}

// ---------------------------------------------------------------------------
// TCP protocol

namespace {

class LauncherSession final : public net::Session {
 public:
  explicit LauncherSession(Launcher& launcher) : launcher_(launcher) {}

  net::Frame handle(const net::Frame& req) override {
    json reply;
    try {
      reply = dispatch(static_cast<LauncherOp>(req.opcode), json::parse(req.body));
    } catch (const Error& e) {
      reply = net::error_reply(to_string(e.code()), e.detail());
    } catch (const json::exception& e) {
      reply = net::error_reply("BAD_REQUEST", e.what());
    }
    return {req.opcode, reply.dump()};
  }

 private:
  json dispatch(LauncherOp op, const json& body) {
    switch (op) {
      case LauncherOp::Launch:
        if (body.contains("descriptor")) {
          launcher_.launch(descriptor_from_json(body["descriptor"]));
        } else {
          launcher_.launch(body.at("module_id").get<std::string>());
        }
        return net::ok_reply();
      case LauncherOp::Terminate:
        launcher_.terminate(body.at("module_id").get<std::string>());
        return net::ok_reply();
      case LauncherOp::List: {
        json modules = json::array();
        for (const auto& s : launcher_.list()) modules.push_back(json(status_to_json(s)));
        return net::ok_reply({{"modules", std::move(modules)}});
      }
      case LauncherOp::Fault: {
        std::optional<Stage> at;
        if (body.contains("at") && !body["at"].is_null()) {
          auto name = body["at"].get<std::string>();
          at = stage_from_string(name);
          if (!at) throw Error(Errc::BadParam, "unknown stage " + name);
        }
        launcher_.fault(body.at("module_id").get<std::string>(), at);
        return net::ok_reply();
      }
    }
    throw Error(Errc::BadRequest, "unknown opcode");
  }

  Launcher& launcher_;
};

}  // namespace

LauncherServer::LauncherServer(Launcher& launcher, std::string host, std::uint16_t port)
    : server_(std::move(host), port, [&launcher] { return std::make_unique<LauncherSession>(launcher); }) {}

void LauncherClient::launch(const ModuleDescriptor& d) {
  client_.call(static_cast<std::uint8_t>(LauncherOp::Launch), {{"descriptor", descriptor_to_json(d)}});
}

void LauncherClient::launch(const std::string& module_id) {
  client_.call(static_cast<std::uint8_t>(LauncherOp::Launch), {{"module_id", module_id}});
}

void LauncherClient::terminate(const std::string& module_id) {
  client_.call(static_cast<std::uint8_t>(LauncherOp::Terminate), {{"module_id", module_id}});
}

void LauncherClient::fault(const std::string& module_id, std::optional<Stage> at) {
  json body{{"module_id", module_id}};
  if (at) body["at"] = to_string(*at);
  client_.call(static_cast<std::uint8_t>(LauncherOp::Fault), body);
}

std::vector<ModuleStatus> LauncherClient::list() {
  auto reply = client_.call(static_cast<std::uint8_t>(LauncherOp::List), json::object());
  std::vector<ModuleStatus> out;
  for (const auto& m : reply.at("modules")) out.push_back(status_from_json(m));
  return out;
}

}  // namespace vpe::rt
