#pragma once

// HTTP/JSON front end: task submission, status and results read back from
// the metastore, module listing from the launcher, and feedback capture.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "json.hpp"
#include "vpe/launcher.hpp"
#include "vpe/metastore.hpp"
#include "vpe/msgbus.hpp"

namespace vpe::gw {

struct GatewayOptions {
  /// A waiting node with no new result in the task for this long is STALLED.
  std::chrono::milliseconds stall_ttl{std::chrono::hours(1)};
  /// Value of Access-Control-Allow-Origin.
  std::string cors_origin = "*";
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

/// Transport-free request handlers. Query parameters arrive as a plain map.
class Gateway {
 public:
  Gateway(rt::ModuleDirectory& modules, store::Store& store, bus::Bus& bus, GatewayOptions options = {});

  Response submit_task(const std::string& body);
  Response task_status(const std::string& task_id);
  Response task_results(const std::string& task_id, const std::map<std::string, std::string>& query);
  Response list_modules();
  Response submit_feedback(const std::string& body);
  Response export_feedback(const std::map<std::string, std::string>& query);

  const GatewayOptions& options() const noexcept { return options_; }

 private:
  rt::ModuleDirectory& modules_;
  store::Store& store_;
  bus::Bus& bus_;
  GatewayOptions options_;
};

/// Serves a Gateway over HTTP/1.1 on a background thread.
class HttpServer {
 public:
  /// Port 0 picks a free port. Throws Error{IO_FAIL} if binding fails.
  HttpServer(Gateway& gateway, const std::string& host, std::uint16_t port);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  std::uint16_t port() const noexcept { return port_; }
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::uint16_t port_ = 0;
  std::thread thread_;
};

}  // namespace vpe::gw
