#include "vpe/codec.hpp"

#include <limits>

namespace vpe::flow {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr int kMaxDepth = 16;

[[noreturn]] void malformed(const std::string& what) { throw Error(Errc::DecodeMalformed, what); }

const json& member(const json& obj, const char* key) {
  if (!obj.is_object()) malformed(std::string("expected an object holding '") + key + "'");
  auto it = obj.find(key);
  if (it == obj.end()) malformed(std::string("missing field '") + key + "'");
  return *it;
}

std::string get_string(const json& j, const char* what) {
  if (!j.is_string()) malformed(std::string(what) + " must be a string");
  return j.get<std::string>();
}

NodeId get_node_id(const json& j, const char* what) {
  if (!j.is_number_integer()) malformed(std::string(what) + " must be an integer");
  if (j.is_number_unsigned()) {
    auto v = j.get<std::uint64_t>();
    if (v > static_cast<std::uint64_t>(std::numeric_limits<NodeId>::max())) malformed(std::string(what) + " out of range");
    return static_cast<NodeId>(v);
  }
  auto v = j.get<std::int64_t>();
  if (v < std::numeric_limits<NodeId>::min() || v > std::numeric_limits<NodeId>::max()) {
    malformed(std::string(what) + " out of range");
  }
  return static_cast<NodeId>(v);
}

Bytes get_b64(const json& j, const char* what) {
  auto decoded = base64_decode(get_string(j, what));
  if (!decoded) malformed(std::string(what) + " is not valid base64");
  return *decoded;
}

}  // namespace

ordered_json graph_to_json(const FlowGraph& graph) {
  FlowGraph g = graph.canonical();
  ordered_json nodes = ordered_json::array();
  for (const auto& n : g.nodes) {
    ordered_json params = ordered_json::array();
    for (const auto& [k, v] : n.params) params.push_back(ordered_json::array({k, v}));
    ordered_json node;
    node["id"] = n.id;
    node["module"] = n.module;
    node["params"] = std::move(params);
    node["extra"] = base64_encode(n.extra);
    nodes.push_back(std::move(node));
  }
  ordered_json links = ordered_json::array();
  for (const auto& l : g.links) {
    ordered_json link;
    link["from"] = l.from;
    link["to"] = l.to;
    links.push_back(std::move(link));
  }
  ordered_json out;
  out["nodes"] = std::move(nodes);
  out["links"] = std::move(links);
  return out;
}

FlowGraph graph_from_json(const json& j) {
  FlowGraph g;
  const json& nodes = member(j, "nodes");
  if (!nodes.is_array()) malformed("graph.nodes must be an array");
  for (const auto& jn : nodes) {
    FlowNode n;
    n.id = get_node_id(member(jn, "id"), "node id");
    n.module = get_string(member(jn, "module"), "node module");
    if (auto it = jn.find("params"); it != jn.end()) {
      if (!it->is_array()) malformed("node params must be an array");
      for (const auto& p : *it) {
        if (!p.is_array() || p.size() != 2) malformed("each param must be a [key, value] pair");
        n.params.emplace_back(get_string(p[0], "param key"), get_string(p[1], "param value"));
      }
    }
    if (auto it = jn.find("extra"); it != jn.end()) n.extra = get_b64(*it, "node extra");
    g.nodes.push_back(std::move(n));
  }
  if (auto it = j.find("links"); it != j.end()) {
    if (!it->is_array()) malformed("graph.links must be an array");
    for (const auto& jl : *it) {
      g.links.push_back({get_node_id(member(jl, "from"), "link from"), get_node_id(member(jl, "to"), "link to")});
    }
  }
  return g;
}

ordered_json payload_to_json(const Payload& payload) {
  ordered_json records = ordered_json::array();
  for (const auto& r : payload.records) records.push_back(base64_encode(r));
  ordered_json out;
  out["datatype"] = payload.datatype;
  out["producer_node"] = payload.producer_node;
  out["records"] = std::move(records);
  return out;
}

Payload payload_from_json(const json& j) {
  Payload p;
  p.datatype = get_string(member(j, "datatype"), "payload datatype");
  if (auto it = j.find("producer_node"); it != j.end()) p.producer_node = get_node_id(*it, "producer_node");
  const json& records = member(j, "records");
  if (!records.is_array()) malformed("payload records must be an array");
  for (const auto& r : records) p.records.push_back(get_b64(r, "record"));
  return p;
}

ordered_json report_to_json(const ValidationReport& report) {
  ordered_json errors = ordered_json::array();
  for (const auto& e : report.errors) {
    ordered_json item;
    item["code"] = e.code;
    item["detail"] = e.detail;
    errors.push_back(std::move(item));
  }
  ordered_json out;
  out["ok"] = report.ok();
  out["errors"] = std::move(errors);
  return out;
}

Bytes encode_taskdata(const TaskData& td) {
  if (auto bad = taskdata_violations(td); !bad.empty()) throw Error(Errc::EncodeInvalid, bad.front());
  ordered_json out;
  out["v"] = 1;
  out["task_id"] = td.task_id;
  out["nme"] = td.nme;
  out["graph"] = graph_to_json(td.graph);
  out["payload"] = payload_to_json(td.payload);
  try {
    return out.dump();
  } catch (const json::exception& e) {
    // Strings that are not valid UTF-8 cannot be represented.
    throw Error(Errc::EncodeInvalid, e.what());
  }
}

TaskData decode_taskdata(std::string_view bytes) {
  json j;
  try {
    j = json::parse(bytes, [](int depth, json::parse_event_t, json&) {
      if (depth > kMaxDepth) throw Error(Errc::DecodeMalformed, "nesting too deep");
      return true;
    });
  } catch (const json::exception& e) {
    malformed(e.what());
  }
  const json& version = member(j, "v");
  if (!version.is_number_integer() || version.get<std::int64_t>() != 1) malformed("unsupported version");

  TaskData td;
  td.task_id = get_string(member(j, "task_id"), "task_id");
  td.nme = get_node_id(member(j, "nme"), "nme");
  td.graph = graph_from_json(member(j, "graph"));
  td.payload = payload_from_json(member(j, "payload"));
  if (!member(j, "payload").contains("producer_node")) malformed("missing field 'producer_node'");

  if (auto bad = taskdata_violations(td); !bad.empty()) throw Error(Errc::DecodeInvalid, bad.front());
  return td;
}

}  // namespace vpe::flow
