#include "vpe/flowgraph.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <queue>

namespace vpe::flow {

std::optional<std::string> FlowNode::param(std::string_view key) const {
  for (const auto& [k, v] : params) {
    if (k == key) return v;
  }
  return std::nullopt;
}

const FlowNode* FlowGraph::find(NodeId id) const noexcept {
  for (const auto& n : nodes) {
    if (n.id == id) return &n;
  }
  return nullptr;
}

FlowGraph FlowGraph::canonical() const {
  FlowGraph out = *this;
  std::stable_sort(out.nodes.begin(), out.nodes.end(),
                   [](const FlowNode& a, const FlowNode& b) { return a.id < b.id; });
  std::sort(out.links.begin(), out.links.end());
  return out;
}

bool operator==(const FlowGraph& a, const FlowGraph& b) {
  if (a.nodes.size() != b.nodes.size() || a.links.size() != b.links.size()) return false;
  FlowGraph ca = a.canonical();
  FlowGraph cb = b.canonical();
  return ca.nodes == cb.nodes && ca.links == cb.links;
}

bool ValidationReport::has(Errc code) const noexcept { return count(code) > 0; }

std::size_t ValidationReport::count(Errc code) const noexcept {
  auto name = to_string(code);
  return static_cast<std::size_t>(
      std::count_if(errors.begin(), errors.end(), [&](const ValidationIssue& e) { return e.code == name; }));
}

void ValidationReport::add(Errc code, std::string detail) {
  errors.push_back({std::string(to_string(code)), std::move(detail)});
}

namespace {

std::string link_str(const FlowLink& l) { return std::to_string(l.from) + "->" + std::to_string(l.to); }

// Kahn's algorithm over the links whose endpoints both exist. Returns the
// emitted order; nodes left out of it lie on or behind a cycle.
std::vector<NodeId> kahn(const std::set<NodeId>& ids, const std::set<FlowLink>& links) {
  std::map<NodeId, int> indegree;
  std::map<NodeId, std::vector<NodeId>> out;
  for (NodeId id : ids) indegree[id] = 0;
  for (const auto& l : links) {
    ++indegree[l.to];
    out[l.from].push_back(l.to);
  }
  std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
  for (const auto& [id, deg] : indegree) {
    if (deg == 0) ready.push(id);
  }
  std::vector<NodeId> order;
  order.reserve(ids.size());
  while (!ready.empty()) {
    NodeId u = ready.top();
    ready.pop();
    order.push_back(u);
    for (NodeId v : out[u]) {
      if (--indegree[v] == 0) ready.push(v);
    }
  }
  return order;
}

struct Structure {
  std::set<NodeId> ids;
  std::set<FlowLink> links;  // deduplicated, endpoints present
};

Structure analyse(const FlowGraph& graph, ValidationReport& report, const std::set<std::string>& known) {
  Structure s;
  if (graph.nodes.empty()) report.add(Errc::Empty, "graph has no nodes");
  for (const auto& n : graph.nodes) {
    if (n.id < 0) {
      report.add(Errc::BadNode, "node id " + std::to_string(n.id) + " is negative");
      continue;
    }
    if (!s.ids.insert(n.id).second) {
      report.add(Errc::DupNode, "node id " + std::to_string(n.id) + " appears more than once");
    }
    if (!known.empty() && !known.contains(n.module)) {
      report.add(Errc::UnknownModule, "node " + std::to_string(n.id) + " names unregistered module '" + n.module + "'");
    } else if (!is_token(n.module)) {
      report.add(Errc::BadName, "node " + std::to_string(n.id) + " has invalid module name '" + n.module + "'");
    }
  }
  std::set<FlowLink> seen;
  for (const auto& l : graph.links) {
    if (!seen.insert(l).second) {
      report.add(Errc::DupLink, "link " + link_str(l) + " appears more than once");
      continue;
    }
    bool from_ok = s.ids.contains(l.from);
    bool to_ok = s.ids.contains(l.to);
    if (!from_ok || !to_ok) {
      report.add(Errc::Dangling, "link " + link_str(l) + " references a missing node");
      continue;
    }
    s.links.insert(l);
  }
  auto order = kahn(s.ids, s.links);
  if (order.size() != s.ids.size()) {
    std::set<NodeId> emitted(order.begin(), order.end());
    std::string stuck;
    for (NodeId id : s.ids) {
      if (!emitted.contains(id)) stuck += (stuck.empty() ? "" : ",") + std::to_string(id);
    }
    report.add(Errc::Cycle, "cycle through nodes {" + stuck + "}");
  }
  return s;
}

}  // namespace

ValidationReport validate_graph(const FlowGraph& graph, const std::set<std::string>& known_modules) {
  ValidationReport report;
  analyse(graph, report, known_modules);
  return report;
}

std::vector<NodeId> topo_order(const FlowGraph& graph) {
  ValidationReport report;
  Structure s = analyse(graph, report, {});
  if (!report.ok()) {
    Errc code = report.has(Errc::Cycle) ? Errc::Cycle : errc_from_string(report.errors.front().code);
    throw Error(code, report.errors.front().detail);
  }
  return kahn(s.ids, s.links);
}

std::set<NodeId> predecessors(const FlowGraph& graph, NodeId node) {
  if (graph.find(node) == nullptr) throw Error(Errc::NotFound, "node " + std::to_string(node));
  std::set<NodeId> out;
  for (const auto& l : graph.links) {
    if (l.to == node) out.insert(l.from);
  }
  return out;
}

std::set<NodeId> successors(const FlowGraph& graph, NodeId node) {
  if (graph.find(node) == nullptr) throw Error(Errc::NotFound, "node " + std::to_string(node));
  std::set<NodeId> out;
  for (const auto& l : graph.links) {
    if (l.from == node) out.insert(l.to);
  }
  return out;
}

const FlowNode& locate_self(const TaskData& td, std::string_view module_id) {
  const FlowNode* node = td.graph.find(td.nme);
  if (node == nullptr) throw Error(Errc::NotFound, "nme " + std::to_string(td.nme) + " is not in the graph");
  if (node->module != module_id) {
    throw Error(Errc::Misrouted, "task " + td.task_id + " node " + std::to_string(td.nme) + " belongs to '" +
                                     node->module + "', not '" + std::string(module_id) + "'");
  }
  return *node;
}

std::vector<std::string> taskdata_violations(const TaskData& td) {
  std::vector<std::string> out;
  if (!is_uuid(td.task_id)) out.push_back("task_id '" + td.task_id + "' is not a lowercase UUID");
  auto report = validate_graph(td.graph);
  for (const auto& e : report.errors) out.push_back(e.code + ": " + e.detail);
  if (!is_token(td.payload.datatype)) out.push_back("datatype '" + td.payload.datatype + "' is not a token");
  if (td.graph.find(td.nme) == nullptr) {
    out.push_back("nme " + std::to_string(td.nme) + " is not a node of the graph");
  } else if (td.payload.producer_node != kSourceProducer) {
    bool linked = std::any_of(td.graph.links.begin(), td.graph.links.end(), [&](const FlowLink& l) {
      return l.from == td.payload.producer_node && l.to == td.nme;
    });
    if (!linked) {
      out.push_back("producer_node " + std::to_string(td.payload.producer_node) + " is not a predecessor of nme " +
                    std::to_string(td.nme));
    }
  }
  return out;
}

}  // namespace vpe::flow
