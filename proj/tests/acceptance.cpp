// Acceptance run: one line per criterion, nonzero exit if any fails.
// Usage: acceptance [criterion numbers...]

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "httplib.h"
#include "json.hpp"
#include "support/two_input.hpp"
#include "support/generators.hpp"
#include "support/oracles.hpp"
#include "support/stack.hpp"
#include "vpe/codec.hpp"
#include "vpe/launcher.hpp"
#include "vpe/metastore.hpp"
#include "vpe/msgbus.hpp"
#include "vpe/runner.hpp"

using namespace vpe;
using namespace std::chrono_literals;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

/// Thrown by `expect` to end a criterion with a reason.
struct Failed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
  if (!ok) throw Failed(what);
}

std::string cli_failure(const fixtures::CliResult& r) {
  return "exit " + std::to_string(r.code) + ": " + fixtures::trim_line(r.err);
}

void cli_ok(const fixtures::Stack& s, const std::vector<std::string>& args) {
  auto r = s.vpe(args);
  std::string joined;
  for (const auto& a : args) joined += a + " ";
  expect(r.code == 0, "vpe " + joined + "failed, " + cli_failure(r));
}

void start_module(const fixtures::Stack& s, const std::string& id, const std::string& types, const std::string& proc) {
  cli_ok(s, {"module", "start", id, "--datatypes", types, "--processor", proc});
}

json http_json(httplib::Result& res, const std::string& what) {
  expect(static_cast<bool>(res), what + ": no response");
  auto j = json::parse(res->body, nullptr, false);
  expect(!j.is_discarded(), what + ": body is not JSON");
  return j;
}

std::string submit_http(httplib::Client& c, const flow::FlowGraph& g) {
  auto res = c.Post("/tasks", json{{"graph", flow::graph_to_json(g)}}.dump(), "application/json");
  auto body = http_json(res, "POST /tasks");
  expect(res->status == 201, "POST /tasks returned " + std::to_string(res->status) + " " + res->body);
  return body.at("task_id").get<std::string>();
}

std::string overall(httplib::Client& c, const std::string& task) {
  auto res = c.Get("/tasks/" + task);
  if (!res || res->status != 200) return "";
  return json::parse(res->body).value("overall", "");
}

/// Polls until every task is COMPLETE; returns how many are still not.
std::size_t wait_complete(httplib::Client& c, std::vector<std::string> pending, std::chrono::seconds timeout) {
  auto deadline = Clock::now() + timeout;
  while (!pending.empty() && Clock::now() < deadline) {
    std::vector<std::string> still;
    for (const auto& t : pending) {
      if (overall(c, t) != "COMPLETE") still.push_back(t);
    }
    pending = std::move(still);
    if (!pending.empty()) std::this_thread::sleep_for(20ms);
  }
  return pending.size();
}

/// Reads the metastore's log file directly: u32 big-endian length, then JSON.
std::vector<json> store_log_entries(const std::filesystem::path& file) {
  auto raw = fixtures::slurp(file);
  std::vector<json> out;
  std::size_t pos = 0;
  while (pos + 4 <= raw.size()) {
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len = (len << 8) | static_cast<unsigned char>(raw[pos + static_cast<std::size_t>(i)]);
    if (pos + 4 + len > raw.size()) break;
    out.push_back(json::parse(raw.substr(pos + 4, len)));
    pos += 4 + len;
  }
  return out;
}

json module_list(const fixtures::Stack& s) {
  auto r = s.vpe({"module", "list", "--json"});
  expect(r.code == 0, "module list failed, " + cli_failure(r));
  return json::parse(r.out);
}

// ---------------------------------------------------------------------------

std::string dag_suite() {
  gen::Rng rng(1001);
  int cyclic = 0;
  const int kGraphs = 2000;
  for (int i = 0; i < kGraphs; ++i) {
    auto g = i % 2 ? gen::any_graph(rng, 10) : gen::dag(rng, 10);
    std::vector<int> nodes;
    std::vector<oracle::Edge> edges;
    for (const auto& n : g.nodes) nodes.push_back(n.id);
    for (const auto& l : g.links) edges.emplace_back(l.from, l.to);
    bool has_cycle = oracle::has_cycle_dfs(nodes, edges);
    auto report = flow::validate_graph(g);
    expect(report.ok() == !has_cycle, "graph " + std::to_string(i) + ": validate_graph disagrees with DFS oracle");
    expect(report.has(Errc::Cycle) == has_cycle, "graph " + std::to_string(i) + ": CYCLE flag disagrees");
    if (has_cycle) {
      ++cyclic;
      continue;
    }
    auto order = flow::topo_order(g);
    expect(order.size() == g.nodes.size(), "topo_order lost nodes");
    std::map<int, std::size_t> position;
    for (std::size_t k = 0; k < order.size(); ++k) position[order[k]] = k;
    expect(position.size() == nodes.size(), "topo_order repeated a node");
    for (const auto& [u, v] : edges) expect(position.at(u) < position.at(v), "topo_order violates a link");
  }
  return std::to_string(kGraphs) + " graphs (" + std::to_string(cyclic) + " cyclic) agree with the DFS oracle";
}

std::string codec_suite() {
  gen::Rng rng(2002);
  for (int i = 0; i < 1000; ++i) {
    auto td = gen::taskdata(rng);
    auto bytes = flow::encode_taskdata(td);
    auto back = flow::decode_taskdata(bytes);
    expect(back == td, "round trip changed TaskData " + std::to_string(i));
    expect(flow::encode_taskdata(back) == bytes, "re-encoding differs for TaskData " + std::to_string(i));
    auto shuffled = td;
    std::shuffle(shuffled.graph.nodes.begin(), shuffled.graph.nodes.end(), rng);
    std::shuffle(shuffled.graph.links.begin(), shuffled.graph.links.end(), rng);
    expect(flow::encode_taskdata(shuffled) == bytes, "encoding depends on node/link order");
  }

  std::vector<Bytes> seeds;
  for (int i = 0; i < 50; ++i) seeds.push_back(flow::encode_taskdata(gen::taskdata(rng)));
  int accepted = 0;
  const int kFuzz = 100000;
  for (int i = 0; i < kFuzz; ++i) {
    Bytes input;
    switch (i % 4) {
      case 0:
        input = gen::bytes(rng, 64);
        break;
      case 1: {
        input = seeds[rng() % seeds.size()];
        int flips = gen::uniform(rng, 1, 4);
        for (int f = 0; f < flips && !input.empty(); ++f) input[rng() % input.size()] ^= static_cast<char>(1 << (rng() % 8));
        break;
      }
      case 2: {
        input = seeds[rng() % seeds.size()];
        input.resize(rng() % (input.size() + 1));
        break;
      }
      default: {
        input = seeds[rng() % seeds.size()];
        auto at = rng() % (input.size() + 1);
        input.insert(at, gen::ascii(rng, 6));
        break;
      }
    }
    try {
      auto td = flow::decode_taskdata(input);
      expect(flow::taskdata_violations(td).empty(), "decoder accepted an invalid TaskData");
      flow::encode_taskdata(td);
      ++accepted;
    } catch (const Error& e) {
      expect(e.code() == Errc::DecodeMalformed || e.code() == Errc::DecodeInvalid,
             "fuzz input raised " + std::string(to_string(e.code())));
    }
  }
  return "1000 round trips deterministic; " + std::to_string(kFuzz) + " fuzz inputs (" + std::to_string(accepted) +
         " decodable) without a crash";
}

std::string broker_durability() {
  fixtures::TempDir dir("vpe-accept-bus");
  auto data = (dir / "data").string();
  gen::Rng rng(3003);
  std::vector<std::pair<std::string, Bytes>> sent;
  {
    fixtures::Service bus(dir.path(), "bus", {"bus", "start", "--dir", data});
    bus::RemoteBus remote(bus.endpoint());
    remote.create_topic("durable");
    for (int i = 0; i < 1000; ++i) {
      auto key = gen::uuid(rng);
      auto value = gen::bytes(rng, 200);
      expect(remote.publish("durable", key, value) == i, "publish returned an unexpected offset");
      sent.emplace_back(key, value);
    }
    bus.stop(SIGKILL);
  }
  fixtures::Service bus(dir.path(), "bus", {"bus", "start", "--dir", data});
  bus::RemoteBus remote(bus.endpoint());
  auto consumer = remote.subscribe("durable", "reader");
  std::vector<bus::BusMessage> got;
  auto deadline = Clock::now() + 10s;
  while (got.size() < sent.size() && Clock::now() < deadline) {
    auto batch = consumer->poll(256, 100ms);
    got.insert(got.end(), batch.begin(), batch.end());
  }
  expect(got.size() == sent.size(), "read back " + std::to_string(got.size()) + " of 1000 messages");
  for (std::size_t i = 0; i < got.size(); ++i) {
    expect(got[i].offset == static_cast<bus::Offset>(i), "offsets out of order at " + std::to_string(i));
    expect(got[i].key == sent[i].first && got[i].value == sent[i].second, "message " + std::to_string(i) + " differs");
  }
  return "1000 messages byte-identical and in order after SIGKILL and restart";
}

flow::FlowGraph five_stage(int seed) {
  flow::FlowGraph g;
  g.nodes = {{0, "src", {{"count", "3"}, {"seed", std::to_string(seed)}}, {}},
             {1, "det", {}, {}},
             {2, "trk", {}, {}},
             {3, "att", {}, {}},
             {4, "rank", {{"target", "female|backpack|red"}}, {}}};
  g.links = {{0, 1}, {1, 2}, {2, 3}, {3, 4}};
  return g;
}

std::string at_least_once() {
  fixtures::Stack s;
  const std::vector<std::pair<std::string, std::string>> modules{
      {"src", "frame-source"}, {"det", "detector"}, {"trk", "tracker"}, {"att", "attr-recognizer"}, {"rank", "reid-ranker"}};
  start_module(s, "src", "Trigger", "frame-source");
  start_module(s, "det", "Frame", "detector");
  start_module(s, "trk", "Pedestrian-BBox", "tracker");
  start_module(s, "att", "Pedestrian-Track", "attr-recognizer");
  start_module(s, "rank", "Pedestrian-Attribute", "reid-ranker");

  httplib::Client gw("127.0.0.1", s.gateway.port());
  std::vector<std::string> tasks;
  const std::vector<std::string> stages{"after-poll", "after-execute", "after-publish"};
  const int per_round[] = {7, 7, 6};
  for (std::size_t round = 0; round < stages.size(); ++round) {
    for (const auto& [id, proc] : modules) cli_ok(s, {"fault", "kill", id, "--at", stages[round]});
    for (int i = 0; i < per_round[round]; ++i) {
      tasks.push_back(submit_http(gw, five_stage(static_cast<int>(tasks.size()))));
    }
    bool all_fired = fixtures::wait_until(
        [&] {
          auto list = module_list(s);
          for (const auto& m : list) {
            if (m["restarts"].get<int>() < static_cast<int>(round) + 1 || !m["running"].get<bool>()) return false;
          }
          return true;
        },
        60s);
    expect(all_fired, "not every module was killed and relaunched at " + stages[round]);
  }
  auto left = wait_complete(gw, tasks, 120s);
  expect(left == 0, std::to_string(left) + " of 20 tasks did not complete");

  store::RemoteStore store(s.store.endpoint());
  for (const auto& t : tasks) {
    auto results = store.query_results(t);
    std::set<flow::NodeId> nodes;
    for (const auto& r : results) nodes.insert(r.node_id);
    expect(results.size() == 5 && nodes.size() == 5, "task " + t + " has " + std::to_string(results.size()) + " results");
  }
  // Count result writes in the store's own log, not through its index.
  std::map<std::pair<std::string, int>, int> writes;
  for (const auto& e : store_log_entries(s.dir / "store/store.log")) {
    if (e["t"] == "result") ++writes[{e["r"]["task_id"].get<std::string>(), e["r"]["node_id"].get<int>()}];
  }
  expect(writes.size() == 100, "store log holds results for " + std::to_string(writes.size()) + " (task, node) pairs");
  for (const auto& [key, n] : writes) expect(n == 1, "task " + key.first + " node " + std::to_string(key.second) + " written twice");

  int kills = 0;
  for (const auto& [id, proc] : modules) {
    auto log = s.module_log(id);
    for (const auto& stage : stages) {
      expect(log.find("fault fired at " + stage) != std::string::npos, id + " was not killed at " + stage);
      ++kills;
    }
  }
  for (const auto& m : module_list(s)) expect(m["restarts"] == 3, m["module_id"].get<std::string>() + " restart count");
  return "20 tasks complete, 100 results written once each, " + std::to_string(kills) + " stage kills with relaunch";
}

std::string recovery() {
  fixtures::Stack s;
  start_module(s, "src", "Trigger", "frame-source");
  start_module(s, "det", "Frame", "detector");
  start_module(s, "trk", "Pedestrian-BBox", "tracker");
  httplib::Client gw("127.0.0.1", s.gateway.port());

  flow::FlowGraph chain;
  chain.nodes = {{0, "src", {{"count", "2"}}, {}}, {1, "det", {}, {}}, {2, "trk", {}, {}}};
  chain.links = {{0, 1}, {1, 2}};
  std::vector<std::string> early;
  for (int i = 0; i < 10; ++i) early.push_back(submit_http(gw, chain));
  cli_ok(s, {"module", "stop", "det"});

  // 50 further messages straight onto det's input topic.
  bus::RemoteBus bus(s.bus.endpoint());
  store::RemoteStore store(s.store.endpoint());
  flow::FlowGraph pair;
  pair.nodes = {{0, "det", {}, {}}, {1, "trk", {}, {}}};
  pair.links = {{0, 1}};
  std::vector<std::string> later;
  std::map<std::string, flow::Payload> expected;
  for (std::uint64_t seed = 100; later.size() < 50; ++seed) {
    auto frames = proc::frame_source(3, seed);
    // Frames with no detections look the same to either detector.
    if (proc::detect(frames).records.empty()) continue;
    auto id = new_uuid();
    store.save_task({id, pair, now_ms()});
    expected[id] = proc::detect(frames, true);
    flow::TaskData td{id, 0, pair, frames};
    bus.publish("det-Frame", id, flow::encode_taskdata(td));
    later.push_back(id);
  }
  cli_ok(s, {"module", "start", "det", "--datatypes", "Frame", "--processor", "detector-v2"});

  auto left = wait_complete(gw, later, 45s);
  expect(left == 0, std::to_string(left) + " of the 50 backlog messages were not processed");
  expect(wait_complete(gw, early, 10s) == 0, "tasks submitted before the stop did not complete");
  int by_v2 = 0;
  for (const auto& t : later) {
    auto r = store.query_results(t, 0);
    expect(r.size() == 1, "no detector result for " + t);
    by_v2 += r[0].records == expected[t].records ? 1 : 0;
  }
  expect(by_v2 == 50, std::to_string(by_v2) + " of 50 backlog results came from the replacement");
  return "50 backlog messages consumed by the replacement module; 10 in-flight tasks also completed";
}

class ArrivalLog final : public rt::RunnerObserver {
 public:
  struct Execution {
    std::string task;
    std::set<flow::NodeId> inputs;
    std::set<flow::NodeId> arrived_before;
  };

  void on_arrival(const flow::TaskData& td) override {
    std::lock_guard lock(mu_);
    arrived_[td.task_id].insert(td.payload.producer_node);
  }
  void on_execute(const std::string& task, flow::NodeId, const proc::Inputs& inputs) override {
    std::lock_guard lock(mu_);
    Execution e{task, {}, arrived_[task]};
    for (const auto& [producer, p] : inputs) e.inputs.insert(producer);
    executions_.push_back(std::move(e));
  }
  std::vector<Execution> executions() {
    std::lock_guard lock(mu_);
    return executions_;
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::set<flow::NodeId>> arrived_;
  std::vector<Execution> executions_;
};

struct InProcess {
  fixtures::TempDir dir{"vpe-accept"};
  bus::Broker broker{dir / "bus"};
  store::MetaStore store{dir / "store"};
  rt::ModuleRegistry registry;
  std::map<std::string, std::unique_ptr<rt::ProcessingLedger>> ledgers;

  std::unique_ptr<rt::ModuleRunner> runner(const std::string& module, rt::RunnerObserver* observer) {
    auto d = *registry.find(module);
    auto& ledger = ledgers[module];
    if (!ledger) ledger = std::make_unique<rt::ProcessingLedger>(dir / (module + ".ledger"));
    rt::RunnerOptions o;
    o.observer = observer;
    o.poll_timeout = 20ms;
    return std::make_unique<rt::ModuleRunner>(d, broker, store, proc::ProcessorRegistry::builtin().get(d.processor_id),
                                              [this](const std::string& id) { return registry.find(id); }, *ledger, o);
  }
  void inject(const std::string& topic, const flow::TaskData& td) {
    broker.create_topic(topic);
    broker.publish(topic, td.task_id, flow::encode_taskdata(td));
  }
  bool drained(const std::string& module) {
    for (const auto& t : registry.find(module)->owned_topics()) {
      if (broker.committed(module, t) != broker.end_offset(t)) return false;
    }
    return true;
  }
};

std::string accumulation() {
  InProcess h;
  h.registry.put({"src", {"Trigger"}, "frame-source", 1});
  h.registry.put({"det", {"Frame"}, "detector", 1});
  h.registry.put({"ann", {"Frame", "Pedestrian-BBox"}, "frame-annotator", 1});
  auto g = fixtures::two_input("src", "det", "ann");
  ArrivalLog log;
  gen::Rng rng(6006);

  auto runner = h.runner("ann", &log);
  runner->start();
  std::vector<std::string> tasks;
  int duplicates = 0;
  for (int i = 0; i < 100; ++i) {
    auto task = new_uuid();
    tasks.push_back(task);
    auto frames = proc::frame_source(2, static_cast<std::uint64_t>(i));
    frames.producer_node = 0;
    auto boxes = proc::detect(frames);
    boxes.producer_node = 1;
    std::vector<std::pair<std::string, flow::TaskData>> msgs{{"ann-Frame", {task, 2, g, frames}},
                                                             {"ann-Pedestrian-BBox", {task, 2, g, boxes}}};
    int extra = gen::uniform(rng, 0, 3);
    for (int d = 0; d < extra; ++d) msgs.push_back(msgs[rng() % 2]);
    duplicates += extra;
    std::shuffle(msgs.begin(), msgs.end(), rng);
    for (const auto& [topic, td] : msgs) {
      h.inject(topic, td);
      if (rng() % 4 == 0) std::this_thread::sleep_for(std::chrono::microseconds(rng() % 2000));
    }
    if (i == 50) {
      // Restart mid-run: pending entries are rebuilt from redelivered messages.
      runner->stop();
      runner = h.runner("ann", &log);
      runner->start();
    }
  }
  expect(fixtures::wait_until(
             [&] {
               for (const auto& t : tasks) {
                 if (h.store.query_results(t, 2).empty()) return false;
               }
               return h.drained("ann");
             },
             20s),
         "not every task's node 2 completed");
  runner->stop();
  h.broker.shutdown();

  auto execs = log.executions();
  std::map<std::string, int> per_task;
  for (const auto& e : execs) {
    ++per_task[e.task];
    expect(e.inputs == std::set<flow::NodeId>{0, 1}, "node 2 ran without both inputs");
    expect(e.arrived_before == std::set<flow::NodeId>{0, 1}, "node 2 ran before both inputs arrived");
  }
  expect(per_task.size() == tasks.size(), "executions cover " + std::to_string(per_task.size()) + " of 100 tasks");
  for (const auto& [t, n] : per_task) expect(n == 1, "node 2 of task " + t + " ran " + std::to_string(n) + " times");
  return "100 arrival orders with " + std::to_string(duplicates) + " duplicates and a restart: node 2 ran once each, after both inputs";
}

std::string fan_out() {
  InProcess h;
  h.registry.put({"P", {"Frame"}, "detector", 1});
  h.registry.put({"M1", {"Pedestrian-BBox"}, "tracker", 1});
  h.registry.put({"M2", {"Pedestrian-BBox"}, "frame-annotator", 1});
  flow::FlowGraph g;
  g.nodes = {{0, "P", {}, {}}, {1, "M1", {}, {}}, {2, "M2", {}, {}}};
  g.links = {{0, 1}, {0, 2}};
  auto runner = h.runner("P", nullptr);
  runner->start();
  std::vector<std::string> tasks;
  for (int i = 0; i < 20; ++i) {
    tasks.push_back(new_uuid());
    h.inject("P-Frame", {tasks.back(), 0, g, proc::frame_source(2, static_cast<std::uint64_t>(i))});
  }
  expect(fixtures::wait_until([&] { return h.drained("P"); }, 10s), "producer did not drain its input");
  runner->stop();

  for (const auto& [topic, node] : {std::pair<std::string, int>{"M1-Pedestrian-BBox", 1}, {"M2-Pedestrian-BBox", 2}}) {
    expect(h.broker.has_topic(topic), topic + " was never created");
    auto c = h.broker.subscribe(topic, "check");
    std::map<std::string, int> seen;
    for (auto batch = c->poll(100, 50ms); !batch.empty(); batch = c->poll(100, 50ms)) {
      for (const auto& m : batch) {
        auto td = flow::decode_taskdata(m.value);
        expect(td.nme == node && td.payload.producer_node == 0, topic + " carries a message for the wrong node");
        auto stored = h.store.query_results(td.task_id, 0);
        expect(stored.size() == 1 && stored[0].records == td.payload.records, topic + " payload differs from P's result");
        ++seen[td.task_id];
      }
    }
    expect(seen.size() == tasks.size(), topic + " has messages for " + std::to_string(seen.size()) + " of 20 tasks");
    for (const auto& [t, n] : seen) expect(n == 1, topic + " got task " + t + " " + std::to_string(n) + " times");
  }
  for (const auto& t : h.broker.topics()) {
    expect(t == "P-Frame" || t == "P-DeadLetter" || t == "M1-Pedestrian-BBox" || t == "M2-Pedestrian-BBox",
           "unexpected topic " + t);
  }
  h.broker.shutdown();
  return "20 tasks: one message each on M1-Pedestrian-BBox and M2-Pedestrian-BBox, nothing else";
}

std::string throughput() {
  fixtures::Stack s;
  start_module(s, "src", "Trigger", "frame-source");
  start_module(s, "det", "Frame", "detector");
  start_module(s, "trk", "Pedestrian-BBox", "tracker");
  httplib::Client gw("127.0.0.1", s.gateway.port());
  gw.set_keep_alive(true);
  gw.set_tcp_nodelay(true);
  flow::FlowGraph chain;
  chain.nodes = {{0, "src", {{"count", "1"}}, {}}, {1, "det", {}, {}}, {2, "trk", {}, {}}};
  chain.links = {{0, 1}, {1, 2}};

  auto start = Clock::now();
  std::vector<std::string> tasks;
  for (int i = 0; i < 1000; ++i) tasks.push_back(submit_http(gw, chain));
  auto submitted = Clock::now();
  auto left = wait_complete(gw, tasks, 60s);
  auto secs = std::chrono::duration<double>(Clock::now() - start).count();
  expect(left == 0, std::to_string(left) + " of 1000 tasks incomplete after 60 s");
  std::ostringstream out;
  out.precision(3);
  out << "1000 three-node tasks complete in " << secs << " s (submission "
      << std::chrono::duration<double>(submitted - start).count() << " s)";
  return out.str();
}

std::string gateway_contract() {
  fixtures::Stack s;
  start_module(s, "src", "Trigger", "frame-source");
  start_module(s, "det", "Frame", "detector");
  start_module(s, "trk", "Pedestrian-BBox", "tracker");
  httplib::Client gw("127.0.0.1", s.gateway.port());

  flow::FlowGraph cyclic;
  cyclic.nodes = {{0, "src", {}, {}}, {1, "det", {}, {}}, {2, "trk", {}, {}}};
  cyclic.links = {{0, 1}, {1, 2}, {2, 1}};
  auto res = gw.Post("/tasks", json{{"graph", flow::graph_to_json(cyclic)}}.dump(), "application/json");
  auto body = http_json(res, "POST /tasks (cyclic)");
  expect(res->status == 400, "cyclic graph returned " + std::to_string(res->status));
  bool listed = false;
  for (const auto& e : body["report"]["errors"]) listed = listed || e["code"] == "CYCLE";
  expect(listed, "400 body does not list CYCLE");

  flow::FlowGraph chain;
  chain.nodes = {{0, "src", {{"count", "4"}, {"seed", "9"}}, {}}, {1, "det", {}, {}}, {2, "trk", {}, {}}};
  chain.links = {{0, 1}, {1, 2}};
  auto task = submit_http(gw, chain);
  expect(wait_complete(gw, {task}, 20s) == 0, "task did not complete");
  store::RemoteStore store(s.store.endpoint());
  auto tracks = store.query_results(task, 2);
  expect(tracks.size() == 1 && !tracks[0].records.empty(), "tracker produced no records");

  std::vector<json> sent{
      {{"task_id", task}, {"node_id", 0}, {"kind", "SATISFACTION"}, {"satisfaction", 4}},
      {{"task_id", task}, {"node_id", 2}, {"kind", "SELECTION"}, {"selected_record_indices", {0}}},
      {{"task_id", task}, {"node_id", 1}, {"kind", "REVISION"}, {"revision", base64_encode(std::string("box\0fix", 7))}}};
  std::vector<json> stored;
  for (const auto& f : sent) {
    auto r = gw.Post("/feedback", f.dump(), "application/json");
    auto b = http_json(r, "POST /feedback");
    expect(r->status == 201, "feedback returned " + std::to_string(r->status) + " " + r->body);
    for (const auto& [k, v] : f.items()) expect(b["feedback"][k] == v, "stored feedback changed field " + k);
    stored.push_back(b["feedback"]);
  }
  auto out = (s.dir / "feedback.ndjson").string();
  cli_ok(s, {"feedback", "export", "--out", out});
  std::ifstream in(out);
  std::vector<json> exported;
  for (std::string line; std::getline(in, line);) exported.push_back(json::parse(line));
  expect(exported.size() == stored.size(), "export has " + std::to_string(exported.size()) + " records, expected 3");
  for (std::size_t i = 0; i < stored.size(); ++i) {
    expect(exported[i] == stored[i], "exported record " + std::to_string(i) + " differs from the stored one");
  }

  for (const char* m : {"src", "det", "trk"}) cli_ok(s, {"module", "stop", m});
  for (const auto& m : module_list(s)) expect(m["running"] == false, "a module is still running");
  res = gw.Get("/tasks/" + task);
  body = http_json(res, "GET /tasks with modules stopped");
  expect(res->status == 200 && body["overall"] == "COMPLETE", "status without modules: " + res->body);
  for (const auto& n : body["nodes"]) expect(n["state"] == "DONE", "a node is not DONE without modules");
  res = gw.Get("/tasks/" + task + "/results");
  body = http_json(res, "GET results with modules stopped");
  expect(body["results"].size() == 3, "results listing incomplete without modules");
  return "cyclic graph -> 400 CYCLE; 3 feedback kinds exported field-for-field; status COMPLETE with all modules stopped";
}

struct Criterion {
  int number;
  const char* title;
  std::chrono::seconds limit;
  std::function<std::string()> run;
};

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::err);
  std::vector<Criterion> criteria{
      {1, "DAG suite", 10s, dag_suite},
      {2, "codec suite", 60s, codec_suite},
      {3, "broker durability", 30s, broker_durability},
      {4, "at-least-once under stage kills", 300s, at_least_once},
      {5, "backlog consumed by a replacement module", 60s, recovery},
      {6, "multi-input accumulation", 30s, accumulation},
      {7, "fan-out routing", 10s, fan_out},
      {8, "throughput smoke", 60s, throughput},
      {9, "gateway contract", 30s, gateway_contract},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.contains(c.number)) continue;
    auto start = Clock::now();
    std::string detail;
    bool pass = true;
    try {
      detail = c.run();
    } catch (const std::exception& e) {
      pass = false;
      detail = e.what();
    }
    double secs = std::chrono::duration<double>(Clock::now() - start).count();
    if (pass && secs > static_cast<double>(c.limit.count())) {
      pass = false;
      detail = "took longer than the limit; " + detail;
    }
    failures += pass ? 0 : 1;
    std::printf("criterion %d %-42s %s  %7.2f s (limit %3lld s)  %s\n", c.number, c.title, pass ? "PASS" : "FAIL", secs,
                static_cast<long long>(c.limit.count()), detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
