#pragma once

// Task data model: flow graphs of module invocations and the TaskData
// envelope that travels with every bus message.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "vpe/common.hpp"
#include "vpe/error.hpp"

namespace vpe::flow {

using NodeId = std::int32_t;

/// producer_node of a payload injected from outside the graph (task creation).
inline constexpr NodeId kSourceProducer = -1;

using Param = std::pair<std::string, std::string>;

struct FlowNode {
  NodeId id = 0;
  std::string module;
  std::vector<Param> params;
  Bytes extra;

  /// First value stored under `key`, if any.
  std::optional<std::string> param(std::string_view key) const;

  bool operator==(const FlowNode&) const = default;
};

struct FlowLink {
  NodeId from = 0;
  NodeId to = 0;

  auto operator<=>(const FlowLink&) const = default;
};

struct FlowGraph {
  std::vector<FlowNode> nodes;
  std::vector<FlowLink> links;

  const FlowNode* find(NodeId id) const noexcept;

  /// Copy with nodes sorted by id and links by (from, to).
  FlowGraph canonical() const;

  /// Structural equality: node and link order do not matter.
  friend bool operator==(const FlowGraph& a, const FlowGraph& b);
};

struct Payload {
  std::string datatype;
  std::vector<Bytes> records;
  NodeId producer_node = kSourceProducer;

  bool operator==(const Payload&) const = default;
};

struct TaskData {
  std::string task_id;
  NodeId nme = 0;
  FlowGraph graph;
  Payload payload;

  bool operator==(const TaskData&) const = default;
};

struct ValidationIssue {
  std::string code;
  std::string detail;

  bool operator==(const ValidationIssue&) const = default;
};

struct ValidationReport {
  std::vector<ValidationIssue> errors;

  bool ok() const noexcept { return errors.empty(); }
  bool has(Errc code) const noexcept;
  std::size_t count(Errc code) const noexcept;
  void add(Errc code, std::string detail);
};

/// Reports every structural problem of `graph`. When `known_modules` is
/// non-empty, nodes naming a module outside it are reported as UNKNOWN_MODULE.
ValidationReport validate_graph(const FlowGraph& graph, const std::set<std::string>& known_modules = {});

/// Kahn order with ties broken by ascending node id. Throws Error{CYCLE} on a
/// cyclic graph (or the first structural error code for other invalid input).
std::vector<NodeId> topo_order(const FlowGraph& graph);

/// Throws Error{NOT_FOUND} when `node` is not in the graph.
std::set<NodeId> predecessors(const FlowGraph& graph, NodeId node);
std::set<NodeId> successors(const FlowGraph& graph, NodeId node);

/// Node the message addressed (td.nme), provided it binds `module_id`.
/// Throws Error{MISROUTED} if the node belongs to another module.
const FlowNode& locate_self(const TaskData& td, std::string_view module_id);

/// Lists TaskData invariant violations (graph structure included); empty if valid.
std::vector<std::string> taskdata_violations(const TaskData& td);

}  // namespace vpe::flow
