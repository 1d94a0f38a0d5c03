#pragma once

// Canonical wire form of TaskData:
//
//   {"v":1,"task_id":"...","nme":2,
//    "graph":{"nodes":[{"id":0,"module":"A","params":[["k","v"]],"extra":"<b64>"}],
//             "links":[{"from":0,"to":1}]},
//    "payload":{"datatype":"Frame","producer_node":-1,"records":["<b64>"]}}
//
// Nodes are sorted by id and links by (from, to), so equal values always
// encode to identical bytes.

#include "json.hpp"

#include "vpe/flowgraph.hpp"

namespace vpe::flow {

/// Throws Error{ENCODE_INVALID} if `td` breaks a TaskData invariant.
Bytes encode_taskdata(const TaskData& td);

/// Accepts any key order. Throws Error{DECODE_MALFORMED} for unparsable or
/// mistyped input and Error{DECODE_INVALID} for invariant violations.
TaskData decode_taskdata(std::string_view bytes);

// JSON fragments shared with the HTTP API. The *_from_json readers throw
// Error{DECODE_MALFORMED} on shape/type problems but do not check invariants.
nlohmann::ordered_json graph_to_json(const FlowGraph& graph);
FlowGraph graph_from_json(const nlohmann::json& j);
nlohmann::ordered_json payload_to_json(const Payload& payload);
Payload payload_from_json(const nlohmann::json& j);
nlohmann::ordered_json report_to_json(const ValidationReport& report);

}  // namespace vpe::flow
