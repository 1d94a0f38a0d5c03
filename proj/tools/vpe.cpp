// vpe: operator command line for the bus, store, launcher, gateway and modules.

#include <pthread.h>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "vpe/codec.hpp"
#include "vpe/error.hpp"
#include "vpe/gateway.hpp"
#include "vpe/launcher.hpp"
#include "vpe/metastore.hpp"
#include "vpe/msgbus.hpp"
#include "vpe/net.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vpe;

namespace {

enum Exit { kOk = 0, kIo = 1, kInvalid = 2, kState = 3 };

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::NotRunning:
    case Errc::AlreadyRunning:
      return kState;
    case Errc::IoFail:
    case Errc::Unavailable:
    case Errc::Closed:
      return kIo;
    default:
      return kInvalid;
  }
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

/// Address of a service: the flag, else <PREFIX>_ADDR, else <PREFIX>_PORT on
/// localhost, else the default port.
Endpoint address(const std::string& flag, const std::string& prefix, std::uint16_t default_port) {
  if (!flag.empty()) return Endpoint::parse(flag);
  if (const char* a = std::getenv((prefix + "_ADDR").c_str()); a && *a) return Endpoint::parse(a);
  if (const char* p = std::getenv((prefix + "_PORT").c_str()); p && *p) return Endpoint::parse(p);
  return Endpoint{"127.0.0.1", default_port};
}

std::uint16_t listen_port(int flag, const char* env, std::uint16_t fallback) {
  if (flag >= 0) return static_cast<std::uint16_t>(flag);
  if (const char* p = std::getenv(env); p && *p) return Endpoint::parse(p).port;
  return fallback;
}

/// Blocks SIGINT/SIGTERM for every thread started afterwards.
sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGINT);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

void wait_for_stop(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("signal {}, shutting down", sig);
}

void announce(const std::string& what, std::uint16_t port, const std::string& port_file) {
  if (!port_file.empty()) net::write_port_file(port_file, port);
  spdlog::info("{} listening on port {}", what, port);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFail, "cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const std::string& path) {
  auto text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::BadParam, path + ": " + e.what());
  }
}

httplib::Client http_client(const Endpoint& ep) {
  httplib::Client c(ep.host, ep.port);
  c.set_connection_timeout(std::chrono::seconds(5));
  c.set_read_timeout(std::chrono::seconds(30));
  return c;
}

struct Globals {
  std::string gateway, launcher, store, bus;
  std::string log_level;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vpe: video parsing and evaluation platform"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--gateway", g.gateway, "gateway address host:port (env VPE_GATEWAY_ADDR / VPE_GATEWAY_PORT)");
  app.add_option("--launcher", g.launcher, "launcher address (env VPE_LAUNCHER_ADDR / VPE_LAUNCHER_PORT)");
  app.add_option("--store", g.store, "metastore address (env VPE_STORE_ADDR / VPE_STORE_PORT)");
  app.add_option("--bus", g.bus, "bus address (env VPE_BUS_ADDR / VPE_BUS_PORT)");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error");

  auto gateway_ep = [&] { return address(g.gateway, "VPE_GATEWAY", 7610); };
  auto launcher_ep = [&] { return address(g.launcher, "VPE_LAUNCHER", 7612); };
  auto store_ep = [&] { return address(g.store, "VPE_STORE", 7613); };
  auto bus_ep = [&] { return address(g.bus, "VPE_BUS", 7611); };

  int rc = kOk;
  auto logging = [&](spdlog::level::level_enum fallback) {
    spdlog::set_level(g.log_level.empty() ? fallback : spdlog::level::from_str(g.log_level));
  };
  auto server_logging = [&] { logging(spdlog::level::info); };
  auto client_logging = [&] { logging(spdlog::level::warn); };
  std::string host = "127.0.0.1";
  std::string port_file;
  int port = -1;

  // --- services ------------------------------------------------------------
  auto add_server_flags = [&](CLI::App* cmd) {
    cmd->add_option("--port", port, "listen port; 0 picks a free one");
    cmd->add_option("--host", host, "listen address");
    cmd->add_option("--port-file", port_file, "write the bound port here");
  };

  auto* bus_cmd = app.add_subcommand("bus", "message bus");
  bus_cmd->require_subcommand(1);
  auto* bus_start = bus_cmd->add_subcommand("start", "run the broker until interrupted");
  std::string bus_dir;
  bool bus_fsync = false;
  add_server_flags(bus_start);
  bus_start->add_option("--dir", bus_dir, "data directory (env VPE_BUS_DIR)");
  bus_start->add_flag("--fsync", bus_fsync, "fdatasync every append");
  bus_start->callback([&] {
    server_logging();
    auto signals = block_stop_signals();
    bus::Broker broker(bus_dir.empty() ? env_or("VPE_BUS_DIR", "vpe-data/bus") : bus_dir, {bus_fsync});
    bus::BusServer server(broker, host, listen_port(port, "VPE_BUS_PORT", 7611));
    announce("bus", server.port(), port_file);
    wait_for_stop(signals);
    broker.shutdown();
    server.stop();
  });

  auto* store_cmd = app.add_subcommand("store", "metastore");
  store_cmd->require_subcommand(1);
  auto* store_start = store_cmd->add_subcommand("start", "run the metastore until interrupted");
  std::string store_dir;
  bool store_fsync = false;
  add_server_flags(store_start);
  store_start->add_option("--dir", store_dir, "data directory (env VPE_STORE_DIR)");
  store_start->add_flag("--fsync", store_fsync, "fdatasync every append");
  store_start->callback([&] {
    server_logging();
    auto signals = block_stop_signals();
    store::MetaStore store(store_dir.empty() ? env_or("VPE_STORE_DIR", "vpe-data/store") : store_dir, {store_fsync});
    store::StoreServer server(store, host, listen_port(port, "VPE_STORE_PORT", 7613));
    announce("store", server.port(), port_file);
    wait_for_stop(signals);
    server.stop();
  });

  auto* launcher_cmd = app.add_subcommand("launcher", "module launcher");
  launcher_cmd->require_subcommand(1);
  auto* launcher_start = launcher_cmd->add_subcommand("start", "run the launcher until interrupted");
  std::string state_dir;
  bool no_restart = false;
  int stop_deadline_ms = 5000;
  int restart_delay_ms = 100;
  add_server_flags(launcher_start);
  launcher_start->add_option("--state-dir", state_dir, "registry, configs, ledgers and logs (env VPE_LAUNCHER_DIR)");
  launcher_start->add_flag("--no-restart", no_restart, "do not relaunch modules that die");
  launcher_start->add_option("--stop-deadline-ms", stop_deadline_ms, "grace period before SIGKILL on stop");
  launcher_start->add_option("--restart-delay-ms", restart_delay_ms, "delay before relaunching a dead module");
  launcher_start->callback([&] {
    server_logging();
    auto signals = block_stop_signals();
    rt::LauncherOptions o;
    o.state_dir = state_dir.empty() ? env_or("VPE_LAUNCHER_DIR", "vpe-data/launcher") : state_dir;
    o.executable = fs::read_symlink("/proc/self/exe").string();
    o.bus = bus_ep();
    o.store = store_ep();
    o.auto_restart = !no_restart;
    o.stop_deadline = std::chrono::milliseconds(stop_deadline_ms);
    o.restart_delay = std::chrono::milliseconds(restart_delay_ms);
    rt::Launcher launcher(o);
    rt::LauncherServer server(launcher, host, listen_port(port, "VPE_LAUNCHER_PORT", 7612));
    announce("launcher", server.port(), port_file);
    wait_for_stop(signals);
    server.stop();
  });

  auto* gateway_cmd = app.add_subcommand("gateway", "HTTP gateway");
  gateway_cmd->require_subcommand(1);
  auto* gateway_start = gateway_cmd->add_subcommand("start", "serve the HTTP API until interrupted");
  std::int64_t stall_ttl_ms = 3600 * 1000;
  std::string cors_origin = "*";
  add_server_flags(gateway_start);
  gateway_start->add_option("--stall-ttl-ms", stall_ttl_ms, "report waiting nodes as STALLED after this long");
  gateway_start->add_option("--cors-origin", cors_origin, "Access-Control-Allow-Origin value");
  gateway_start->callback([&] {
    server_logging();
    auto signals = block_stop_signals();
    rt::LauncherClient launcher(launcher_ep());
    store::RemoteStore store(store_ep());
    bus::RemoteBus bus(bus_ep());
    gw::GatewayOptions o;
    o.stall_ttl = std::chrono::milliseconds(stall_ttl_ms);
    o.cors_origin = cors_origin;
    gw::Gateway gateway(launcher, store, bus, o);
    gw::HttpServer server(gateway, host, listen_port(port, "VPE_GATEWAY_PORT", 7610));
    announce("gateway", server.port(), port_file);
    wait_for_stop(signals);
    server.stop();
  });

  // --- modules -------------------------------------------------------------
  auto* module_cmd = app.add_subcommand("module", "start, stop, list or host modules");
  module_cmd->require_subcommand(1);
  std::string module_id;
  std::string datatypes;
  std::string processor_id;

  auto* module_start = module_cmd->add_subcommand("start", "launch a module (register it first with --datatypes/--processor)");
  module_start->add_option("module_id", module_id)->required();
  module_start->add_option("--datatypes", datatypes, "comma-separated input datatypes");
  module_start->add_option("--processor", processor_id, "processor id");
  module_start->callback([&] {
    client_logging();
    rt::LauncherClient launcher(launcher_ep());
    if (datatypes.empty() && processor_id.empty()) {
      launcher.launch(module_id);
    } else {
      if (datatypes.empty() || processor_id.empty()) {
        throw Error(Errc::BadParam, "--datatypes and --processor go together");
      }
      rt::ModuleDescriptor d;
      d.module_id = module_id;
      d.processor_id = processor_id;
      std::stringstream ss(datatypes);
      for (std::string t; std::getline(ss, t, ',');) {
        if (!t.empty()) d.input_datatypes.insert(t);
      }
      launcher.launch(d);
    }
    std::cout << "started " << module_id << "\n";
  });

  auto* module_stop = module_cmd->add_subcommand("stop", "terminate a module");
  module_stop->add_option("module_id", module_id)->required();
  module_stop->callback([&] {
    client_logging();
    rt::LauncherClient(launcher_ep()).terminate(module_id);
    std::cout << "stopped " << module_id << "\n";
  });

  auto* module_list = module_cmd->add_subcommand("list", "show registered modules");
  bool list_json = false;
  module_list->add_flag("--json", list_json, "print JSON");
  module_list->callback([&] {
    client_logging();
    auto modules = rt::LauncherClient(launcher_ep()).list();
    if (list_json) {
      json out = json::array();
      for (const auto& s : modules) out.push_back(json(rt::status_to_json(s)));
      std::cout << out.dump(2) << "\n";
      return;
    }
    for (const auto& s : modules) {
      std::string types;
      for (const auto& t : s.descriptor.input_datatypes) types += (types.empty() ? "" : ",") + t;
      std::cout << s.descriptor.module_id << "\t" << s.descriptor.processor_id << "\t" << types << "\t"
                << (s.running ? "running pid " + std::to_string(s.pid) : std::string("stopped")) << "\trestarts "
                << s.restarts << "\n";
    }
  });

  auto* module_run = module_cmd->add_subcommand("run", "host one module in this process (used by the launcher)");
  std::string config_path;
  module_run->add_option("--config", config_path, "module config file")->required();
  module_run->callback([&] {
    server_logging();
    rc = rt::run_module_process(rt::ModuleConfig::read(config_path));
  });

  // --- tasks ---------------------------------------------------------------
  auto* task_cmd = app.add_subcommand("task", "submit tasks and read their status");
  task_cmd->require_subcommand(1);
  std::string graph_file;
  std::string source_file;
  auto* task_submit = task_cmd->add_subcommand("submit", "submit a task graph");
  task_submit->add_option("--graph", graph_file, "graph JSON file")->required();
  task_submit->add_option("--source", source_file,
                          "source payload JSON: one payload for every source node, or an object keyed by node id");
  task_submit->callback([&] {
    client_logging();
    json graph = read_json(graph_file);
    if (graph.contains("graph")) graph = graph["graph"];
    auto parsed = flow::graph_from_json(graph);
    // Structural problems are caught locally before anything is sent.
    if (auto report = flow::validate_graph(parsed); !report.ok()) {
      std::cerr << flow::report_to_json(report).dump(2) << "\n";
      rc = kInvalid;
      return;
    }
    json body{{"graph", flow::graph_to_json(parsed)}};
    if (!source_file.empty()) {
      json source = read_json(source_file);
      if (source.contains("datatype")) {
        json per_node = json::object();
        std::set<flow::NodeId> roots;
        for (const auto& n : parsed.nodes) roots.insert(n.id);
        for (const auto& l : parsed.links) roots.erase(l.to);
        for (auto id : roots) per_node[std::to_string(id)] = source;
        source = std::move(per_node);
      }
      body["source_payloads"] = source;
    }
    auto ep = gateway_ep();
    auto client = http_client(ep);
    auto res = client.Post("/tasks", body.dump(), "application/json");
    if (!res) throw Error(Errc::Unavailable, "gateway " + ep.str() + " unreachable");
    json reply = json::parse(res->body, nullptr, false);
    if (res->status == 201) {
      std::cout << reply.value("task_id", "") << "\n";
      return;
    }
    std::cerr << (reply.is_discarded() ? res->body : reply.dump(2)) << "\n";
    rc = (res->status == 400 || res->status == 409 || res->status == 422) ? kInvalid : kIo;
  });

  std::string task_id;
  auto* task_status = task_cmd->add_subcommand("status", "print a task's status");
  task_status->add_option("task_id", task_id)->required();
  task_status->callback([&] {
    client_logging();
    auto ep = gateway_ep();
    auto client = http_client(ep);
    auto res = client.Get("/tasks/" + task_id);
    if (!res) throw Error(Errc::Unavailable, "gateway " + ep.str() + " unreachable");
    json reply = json::parse(res->body, nullptr, false);
    if (res->status != 200) {
      std::cerr << res->body << "\n";
      rc = res->status == 404 ? kIo : kInvalid;
      return;
    }
    std::cout << reply.dump(2) << "\n";
  });

  // --- faults --------------------------------------------------------------
  auto* fault_cmd = app.add_subcommand("fault", "fault injection");
  fault_cmd->require_subcommand(1);
  auto* fault_kill = fault_cmd->add_subcommand("kill", "SIGKILL a module now, or arm it to die at a stage");
  std::string at;
  fault_kill->add_option("module_id", module_id)->required();
  fault_kill->add_option("--at", at, "after-poll, after-execute or after-publish");
  fault_kill->callback([&] {
    client_logging();
    std::optional<rt::Stage> stage;
    if (!at.empty()) {
      stage = rt::stage_from_string(at);
      if (!stage) throw Error(Errc::BadParam, "unknown stage " + at);
    }
    rt::LauncherClient(launcher_ep()).fault(module_id, stage);
  });

  // --- feedback ------------------------------------------------------------
  auto* feedback_cmd = app.add_subcommand("feedback", "feedback records");
  feedback_cmd->require_subcommand(1);
  auto* feedback_export = feedback_cmd->add_subcommand("export", "write feedback as newline-delimited JSON");
  std::string out_path;
  std::string kind;
  std::int64_t since = -1;
  feedback_export->add_option("--module", module_id, "only feedback on results of this module");
  feedback_export->add_option("--kind", kind, "SATISFACTION, SELECTION or REVISION");
  feedback_export->add_option("--since", since, "only records created at or after this time (ms)");
  feedback_export->add_option("--out", out_path, "output file")->required();
  feedback_export->callback([&] {
    client_logging();
    store::FeedbackFilter filter;
    if (!module_id.empty()) filter.module_id = module_id;
    if (!kind.empty()) filter.kind = store::feedback_kind_from_string(kind);
    if (since >= 0) filter.since = since;
    auto records = store::RemoteStore(store_ep()).export_feedback(filter);
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::IoFail, "cannot write " + out_path);
    for (const auto& f : records) out << store::feedback_to_json(f).dump() << "\n";
    out.close();
    if (!out) throw Error(Errc::IoFail, "cannot write " + out_path);
    std::cout << records.size() << " feedback records written to " << out_path << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    std::cerr << app.help();
    return code == 0 ? 1 : code;
  } catch (const Error& e) {
    std::cerr << "vpe: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "vpe: " << e.what() << "\n";
    return kIo;
  }
  return rc;
}
