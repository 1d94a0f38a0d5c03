#include "vpe/gateway.hpp"

#include <algorithm>
#include <set>

#include <spdlog/spdlog.h>

#include "httplib.h"
#include "vpe/codec.hpp"
#include "vpe/error.hpp"
#include "vpe/processors.hpp"

using nlohmann::json;

namespace vpe::gw {

namespace {

Response error(int status, std::string_view code, const std::string& detail) {
  return {status, json{{"ok", false}, {"code", code}, {"detail", detail}}};
}

Response error(int status, const Error& e) { return error(status, to_string(e.code()), e.detail()); }

int status_for(Errc code) {
  switch (code) {
    case Errc::NotFound:
    case Errc::NoResult:
      return 404;
    case Errc::BadIndex:
    case Errc::BadParam:
      return 422;
    case Errc::UnknownModule:
    case Errc::AlreadyRunning:
    case Errc::NotRunning:
      return 409;
    case Errc::Unavailable:
      return 503;
    case Errc::IoFail:
      return 500;
    default:
      return 400;
  }
}

std::optional<json> parse_body(const std::string& body, Response& err) {
  try {
    auto j = json::parse(body);
    if (!j.is_object()) {
      err = error(400, "BAD_REQUEST", "request body must be a JSON object");
      return std::nullopt;
    }
    return j;
  } catch (const json::exception& e) {
    err = error(400, "BAD_REQUEST", e.what());
    return std::nullopt;
  }
}

std::optional<std::int64_t> int_param(const std::map<std::string, std::string>& query, const std::string& key) {
  auto it = query.find(key);
  if (it == query.end()) return std::nullopt;
  std::size_t used = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(it->second, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != it->second.size()) throw Error(Errc::BadParam, key + " must be an integer");
  return v;
}

}  // namespace

Gateway::Gateway(rt::ModuleDirectory& modules, store::Store& store, bus::Bus& bus, GatewayOptions options)
    : modules_(modules), store_(store), bus_(bus), options_(std::move(options)) {}

Response Gateway::submit_task(const std::string& body) {
  Response err;
  auto j = parse_body(body, err);
  if (!j) return err;

  flow::FlowGraph graph;
  std::map<flow::NodeId, flow::Payload> sources;
  try {
    if (!j->contains("graph")) throw Error(Errc::BadRequest, "missing graph");
    graph = flow::graph_from_json((*j)["graph"]);
    if (auto it = j->find("source_payloads"); it != j->end() && !it->is_null()) {
      if (!it->is_object()) throw Error(Errc::BadRequest, "source_payloads must be an object keyed by node id");
      for (const auto& [key, value] : it->items()) {
        std::size_t used = 0;
        flow::NodeId id = 0;
        try {
          id = static_cast<flow::NodeId>(std::stol(key, &used));
        } catch (const std::logic_error&) {
          used = 0;
        }
        if (used == 0 || used != key.size()) throw Error(Errc::BadRequest, "source_payloads key " + key + " is not a node id");
        auto p = flow::payload_from_json(value);
        p.producer_node = flow::kSourceProducer;
        sources[id] = std::move(p);
      }
    }
  } catch (const Error& e) {
    return error(400, e);
  }

  auto report = flow::validate_graph(graph);
  if (!report.ok()) {
    auto r = error(400, report.errors.front().code, "graph is invalid");
    r.body["report"] = flow::report_to_json(report);
    return r;
  }

  std::map<std::string, rt::ModuleDescriptor> registered;
  try {
    for (auto& s : modules_.list()) registered.emplace(s.descriptor.module_id, std::move(s.descriptor));
  } catch (const Error& e) {
    return error(503, e);
  }

  std::set<flow::NodeId> roots;
  for (const auto& n : graph.nodes) roots.insert(n.id);
  for (const auto& l : graph.links) roots.erase(l.to);

  flow::ValidationReport routing;
  for (const auto& n : graph.nodes) {
    if (!registered.contains(n.module)) {
      routing.add(Errc::UnknownModule, "node " + std::to_string(n.id) + " names unregistered module " + n.module);
    }
  }
  if (!routing.ok()) {
    auto r = error(409, "UNKNOWN_MODULE", routing.errors.front().detail);
    r.body["report"] = flow::report_to_json(routing);
    return r;
  }

  auto processors = proc::ProcessorRegistry::builtin();
  for (const auto& l : graph.links) {
    const auto& head = registered.at(graph.find(l.from)->module);
    const auto& tail = registered.at(graph.find(l.to)->module);
    if (!processors.contains(head.processor_id)) continue;
    const auto& produces = processors.get(head.processor_id)->contract().produces;
    bool any = std::any_of(produces.begin(), produces.end(),
                           [&](const std::string& d) { return tail.input_datatypes.contains(d); });
    if (!any) {
      routing.add(Errc::RouteMismatch, "link " + std::to_string(l.from) + "->" + std::to_string(l.to) + ": module " +
                                           tail.module_id + " accepts nothing that " + head.module_id + " produces");
    }
  }
  for (const auto& [id, p] : sources) {
    if (!roots.contains(id)) {
      routing.add(Errc::BadNode, "source payload given for node " + std::to_string(id) + ", which is not a source node");
    }
  }
  for (flow::NodeId id : roots) {
    auto it = sources.try_emplace(id, flow::Payload{"Trigger", {}, flow::kSourceProducer}).first;
    const auto& m = registered.at(graph.find(id)->module);
    if (!m.input_datatypes.contains(it->second.datatype)) {
      routing.add(Errc::RouteMismatch, "source node " + std::to_string(id) + ": module " + m.module_id +
                                           " does not accept " + it->second.datatype);
    }
  }
  if (!routing.ok()) {
    auto r = error(400, routing.errors.front().code, routing.errors.front().detail);
    r.body["report"] = flow::report_to_json(routing);
    return r;
  }

  store::TaskRecord task{new_uuid(), graph, now_ms()};
  try {
    store_.save_task(task);
    for (const auto& [id, payload] : sources) {
      flow::TaskData td{task.task_id, id, graph, payload};
      auto topic = rt::input_topic_name(graph.find(id)->module, payload.datatype);
      bus_.create_topic(topic);
      bus_.publish(topic, task.task_id, flow::encode_taskdata(td));
    }
  } catch (const Error& e) {
    return error(status_for(e.code()) == 400 ? 500 : status_for(e.code()), e);
  }
  spdlog::info("task {} submitted with {} nodes", task.task_id, graph.nodes.size());
  return {201, json{{"ok", true}, {"task_id", task.task_id}}};
}

Response Gateway::task_status(const std::string& task_id) {
  try {
    auto task = store_.get_task(task_id);
    auto results = store_.query_results(task_id);
    if (!task && results.empty()) return error(404, "NOT_FOUND", "no task " + task_id);

    std::map<flow::NodeId, const store::ResultRecord*> done;
    std::int64_t last_activity = task ? task->created_at : 0;
    for (const auto& r : results) {
      done[r.node_id] = &r;
      last_activity = std::max(last_activity, r.created_at);
    }
    const bool stale = now_ms() - last_activity > options_.stall_ttl.count();

    json nodes = json::array();
    bool all_done = true;
    bool any_stalled = false;
    auto add = [&](flow::NodeId id, const std::string& module) {
      json n{{"node_id", id}, {"module", module}};
      if (auto it = done.find(id); it != done.end()) {
        n["state"] = "DONE";
        n["finished_at"] = it->second->created_at;
      } else if (stale) {
        n["state"] = "STALLED";
        all_done = false;
        any_stalled = true;
      } else {
        n["state"] = "WAITING";
        all_done = false;
      }
      nodes.push_back(std::move(n));
    };
    if (task) {
      for (const auto& n : task->graph.canonical().nodes) add(n.id, n.module);
    } else {
      // Results without a task record: only what is known can be shown.
      for (const auto& [id, r] : done) add(id, r->module_id);
    }

    json body{{"ok", true}, {"task_id", task_id}};
    body["overall"] = all_done && task ? "COMPLETE" : any_stalled ? "STALLED" : "RUNNING";
    body["created_at"] = task ? task->created_at : 0;
    body["last_activity"] = last_activity;
    body["nodes"] = std::move(nodes);
    return {200, std::move(body)};
  } catch (const Error& e) {
    return error(status_for(e.code()), e);
  }
}

Response Gateway::task_results(const std::string& task_id, const std::map<std::string, std::string>& query) {
  try {
    std::optional<flow::NodeId> node;
    if (auto n = int_param(query, "node")) node = static_cast<flow::NodeId>(*n);
    auto offset = int_param(query, "offset").value_or(0);
    auto limit = int_param(query, "limit");
    if (offset < 0 || (limit && *limit < 0)) throw Error(Errc::BadParam, "offset and limit must not be negative");

    auto results = store_.query_results(task_id, node);
    if (results.empty() && !store_.get_task(task_id)) return error(404, "NOT_FOUND", "no task " + task_id);

    json out = json::array();
    std::size_t total = results.size();
    auto first = std::min<std::size_t>(offset, total);
    auto last = limit ? std::min<std::size_t>(first + *limit, total) : total;
    for (std::size_t i = first; i < last; ++i) out.push_back(json(store::result_to_json(results[i])));
    return {200, json{{"ok", true}, {"task_id", task_id}, {"total", total}, {"results", std::move(out)}}};
  } catch (const Error& e) {
    return error(status_for(e.code()), e);
  }
}

Response Gateway::list_modules() {
  try {
    json out = json::array();
    for (const auto& s : modules_.list()) out.push_back(json(rt::status_to_json(s)));
    return {200, json{{"ok", true}, {"modules", std::move(out)}}};
  } catch (const Error& e) {
    return error(503, e);
  }
}

Response Gateway::submit_feedback(const std::string& body) {
  Response err;
  auto j = parse_body(body, err);
  if (!j) return err;
  try {
    // Identity and timestamps are assigned by the store.
    j->erase("feedback_id");
    j->erase("created_at");
    auto stored = store_.save_feedback(store::feedback_from_json(*j));
    return {201, json{{"ok", true}, {"feedback_id", stored.feedback_id}, {"feedback", store::feedback_to_json(stored)}}};
  } catch (const Error& e) {
    return error(status_for(e.code()), e);
  }
}

Response Gateway::export_feedback(const std::map<std::string, std::string>& query) {
  try {
    store::FeedbackFilter filter;
    if (auto it = query.find("module"); it != query.end()) filter.module_id = it->second;
    if (auto it = query.find("kind"); it != query.end()) filter.kind = store::feedback_kind_from_string(it->second);
    filter.since = int_param(query, "since");
    json out = json::array();
    for (const auto& f : store_.export_feedback(filter)) out.push_back(json(store::feedback_to_json(f)));
    return {200, json{{"ok", true}, {"feedback", std::move(out)}}};
  } catch (const Error& e) {
    return error(status_for(e.code()), e);
  }
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  httplib::Server server;
};

namespace {

std::map<std::string, std::string> query_of(const httplib::Request& req) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : req.params) out.emplace(k, v);
  return out;
}

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

}  // namespace

HttpServer::HttpServer(Gateway& gw, const std::string& host, std::uint16_t port) : impl_(std::make_unique<Impl>()) {
  auto& s = impl_->server;
  s.set_tcp_nodelay(true);
  s.set_default_headers({{"Access-Control-Allow-Origin", gw.options().cors_origin},
                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                         {"Access-Control-Allow-Headers", "Content-Type"}});
  s.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  s.Post("/tasks", [&gw](const httplib::Request& req, httplib::Response& res) { reply(res, gw.submit_task(req.body)); });
  s.Get(R"(/tasks/([^/]+))", [&gw](const httplib::Request& req, httplib::Response& res) {
    reply(res, gw.task_status(req.matches[1]));
  });
  s.Get(R"(/tasks/([^/]+)/results)", [&gw](const httplib::Request& req, httplib::Response& res) {
    reply(res, gw.task_results(req.matches[1], query_of(req)));
  });
  s.Get("/modules", [&gw](const httplib::Request&, httplib::Response& res) { reply(res, gw.list_modules()); });
  s.Post("/feedback",
         [&gw](const httplib::Request& req, httplib::Response& res) { reply(res, gw.submit_feedback(req.body)); });
  s.Get("/feedback", [&gw](const httplib::Request& req, httplib::Response& res) {
    reply(res, gw.export_feedback(query_of(req)));
  });
  s.Get("/health", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"ok":true})", "application/json");
  });
  s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      res.set_content(json{{"ok", false}, {"code", "NOT_FOUND"}, {"detail", "no such endpoint"}}.dump(),
                      "application/json");
    }
  });
  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    spdlog::error("gateway: {}", what);
    res.status = 500;
    res.set_content(json{{"ok", false}, {"code", "INTERNAL"}, {"detail", what}}.dump(), "application/json");
  });

  if (port == 0) {
    int bound = s.bind_to_any_port(host);
    if (bound < 0) throw Error(Errc::IoFail, "cannot bind " + host);
    port_ = static_cast<std::uint16_t>(bound);
  } else {
    if (!s.bind_to_port(host, port)) throw Error(Errc::IoFail, "cannot bind " + host + ":" + std::to_string(port));
    port_ = port;
  }
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace vpe::gw
