#include "vpe/runtime.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "fileio.hpp"
#include "vpe/codec.hpp"
#include "vpe/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace vpe::rt {

std::set<std::string> ModuleDescriptor::owned_topics() const {
  std::set<std::string> out;
  for (const auto& d : input_datatypes) out.insert(input_topic_name(module_id, d));
  return out;
}

std::string input_topic_name(std::string_view module_id, std::string_view datatype) {
  require_token(module_id, "module_id");
  require_token(datatype, "datatype");
  std::string out(module_id);
  out += '-';
  out += datatype;
  return out;
}

std::string dead_letter_topic(std::string_view module_id) { return input_topic_name(module_id, "DeadLetter"); }

void check_descriptor(const ModuleDescriptor& d) {
  require_token(d.module_id, "module_id");
  require_token(d.processor_id, "processor_id");
  if (d.input_datatypes.empty()) throw Error(Errc::BadParam, "module " + d.module_id + " accepts no datatypes");
  for (const auto& t : d.input_datatypes) {
    require_token(t, "datatype");
    if (t == "DeadLetter") throw Error(Errc::BadName, "datatype DeadLetter is reserved for the dead-letter topic");
  }
  if (d.instance_count < 1) throw Error(Errc::BadParam, "instance_count must be positive");
}

ordered_json descriptor_to_json(const ModuleDescriptor& d) {
  return {{"module_id", d.module_id},
          {"input_datatypes", d.input_datatypes},
          {"processor_id", d.processor_id},
          {"instance_count", d.instance_count}};
}

ModuleDescriptor descriptor_from_json(const json& j) {
  try {
    ModuleDescriptor d;
    d.module_id = j.at("module_id").get<std::string>();
    d.input_datatypes = j.at("input_datatypes").get<std::set<std::string>>();
    d.processor_id = j.at("processor_id").get<std::string>();
    d.instance_count = j.value("instance_count", 1);
    return d;
  } catch (const json::exception& e) {
    throw Error(Errc::BadParam, std::string("bad module descriptor: ") + e.what());
  }
}

void ModuleRegistry::put(const ModuleDescriptor& d) {
  check_descriptor(d);
  auto mine = d.owned_topics();
  mine.insert(dead_letter_topic(d.module_id));
  for (const auto& [id, other] : modules_) {
    if (id == d.module_id) continue;
    auto theirs = other.owned_topics();
    theirs.insert(dead_letter_topic(id));
    for (const auto& t : mine) {
      if (theirs.contains(t)) throw Error(Errc::BadName, "topic " + t + " is already owned by module " + id);
    }
  }
  modules_[d.module_id] = d;
}

bool ModuleRegistry::remove(const std::string& module_id) { return modules_.erase(module_id) > 0; }

std::optional<ModuleDescriptor> ModuleRegistry::find(const std::string& module_id) const {
  if (auto it = modules_.find(module_id); it != modules_.end()) return it->second;
  return std::nullopt;
}

std::vector<ModuleDescriptor> ModuleRegistry::all() const {
  std::vector<ModuleDescriptor> out;
  for (const auto& [id, d] : modules_) out.push_back(d);
  return out;
}

std::set<std::string> ModuleRegistry::module_ids() const {
  std::set<std::string> out;
  for (const auto& [id, d] : modules_) out.insert(id);
  return out;
}

ordered_json ModuleRegistry::to_json() const {
  ordered_json modules = ordered_json::array();
  for (const auto& [id, d] : modules_) modules.push_back(descriptor_to_json(d));
  return {{"modules", std::move(modules)}};
}

ModuleRegistry ModuleRegistry::from_json(const json& j) {
  ModuleRegistry reg;
  if (!j.contains("modules") || !j["modules"].is_array()) throw Error(Errc::BadParam, "registry needs a modules array");
  for (const auto& m : j["modules"]) reg.put(descriptor_from_json(m));
  return reg;
}

void ModuleRegistry::save(const fs::path& path) const { io::write_file_atomic(path, to_json().dump(2) + "\n", false); }

ModuleRegistry ModuleRegistry::load(const fs::path& path) {
  if (!fs::exists(path)) return {};
  auto text = io::read_file(path);
  try {
    return from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(Errc::BadParam, "cannot parse registry " + path.string() + ": " + e.what());
  }
}

std::optional<ModuleDescriptor> RegistryFile::find(const std::string& module_id) {
  std::lock_guard lock(mu_);
  std::error_code ec;
  auto mtime = fs::last_write_time(path_, ec);
  if (!ec && mtime != seen_) {
    try {
      cached_ = ModuleRegistry::load(path_);
      seen_ = mtime;
    } catch (const Error& e) {
      spdlog::warn("registry {}: {}", path_.string(), e.detail());
    }
  }
  return cached_.find(module_id);
}

// ---------------------------------------------------------------------------

Accumulator::Result Accumulator::accumulate(const flow::TaskData& td, const BusPosition& at, std::int64_t now,
                                            const std::function<bool()>& already_done) {
  TaskNode key{td.task_id, td.nme};
  std::lock_guard lock(mu_);
  auto it = slots_.find(key);
  if (it == slots_.end()) {
    auto required = flow::predecessors(td.graph, td.nme);
    if (td.payload.producer_node != flow::kSourceProducer && !required.contains(td.payload.producer_node)) {
      throw Error(Errc::BadProducer, "node " + std::to_string(td.payload.producer_node) + " is not a predecessor of node " +
                                         std::to_string(td.nme));
    }
    if (already_done && already_done()) return {Outcome::Done, {}};
    Slot slot;
    slot.entry = AccumulatorEntry{td.task_id, td.nme, {}, std::move(required), td.graph, now};
    it = slots_.emplace(key, std::move(slot)).first;
  } else if (td.payload.producer_node != flow::kSourceProducer &&
             !it->second.entry.required.contains(td.payload.producer_node)) {
    throw Error(Errc::BadProducer, "node " + std::to_string(td.payload.producer_node) + " is not a predecessor of node " +
                                       std::to_string(td.nme));
  }

  Slot& slot = it->second;
  slot.entry.arrived[td.payload.producer_node] = td.payload;
  slot.pinned.emplace(at.topic, at.offset);
  if (slot.executing) return {Outcome::Pending, {}};

  const auto& e = slot.entry;
  bool ready = e.required.empty() ? e.arrived.contains(flow::kSourceProducer)
                                  : std::all_of(e.required.begin(), e.required.end(),
                                                [&](NodeId p) { return e.arrived.contains(p); });
  if (!ready) return {Outcome::Pending, {}};
  slot.executing = true;
  return {Outcome::Ready, proc::Inputs(e.arrived.begin(), e.arrived.end())};
}

void Accumulator::finish(const TaskNode& key) {
  std::lock_guard lock(mu_);
  slots_.erase(key);
}

void Accumulator::reopen(const TaskNode& key) {
  std::lock_guard lock(mu_);
  if (auto it = slots_.find(key); it != slots_.end()) it->second.executing = false;
}

std::optional<bus::Offset> Accumulator::lowest_pinned(const std::string& topic) const {
  std::lock_guard lock(mu_);
  std::optional<bus::Offset> low;
  for (const auto& [key, slot] : slots_) {
    auto it = slot.pinned.lower_bound({topic, INT64_MIN});
    if (it != slot.pinned.end() && it->first == topic && (!low || it->second < *low)) low = it->second;
  }
  return low;
}

std::vector<AccumulatorEntry> Accumulator::evict_older_than(std::int64_t cutoff) {
  std::lock_guard lock(mu_);
  std::vector<AccumulatorEntry> out;
  for (auto it = slots_.begin(); it != slots_.end();) {
    if (!it->second.executing && it->second.entry.first_arrival_time < cutoff) {
      out.push_back(std::move(it->second.entry));
      it = slots_.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

std::size_t Accumulator::size() const {
  std::lock_guard lock(mu_);
  return slots_.size();
}

std::optional<AccumulatorEntry> Accumulator::peek(const TaskNode& key) const {
  std::lock_guard lock(mu_);
  if (auto it = slots_.find(key); it != slots_.end()) return it->second.entry;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

ProcessingLedger::ProcessingLedger(const fs::path& path, bool fsync) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  log_ = std::make_unique<io::RecordLog>(path, fsync, [this](std::string_view rec) {
    try {
      auto j = json::parse(rec);
      std::vector<flow::Payload> outputs;
      for (const auto& p : j.at("outputs")) outputs.push_back(flow::payload_from_json(p));
      done_.try_emplace({j.at("task_id").get<std::string>(), j.at("node_id").get<NodeId>()}, std::move(outputs));
    } catch (const std::exception& e) {
      spdlog::warn("ledger: skipping unreadable entry: {}", e.what());
    }
  });
}

ProcessingLedger::~ProcessingLedger() = default;

bool ProcessingLedger::contains(const TaskNode& key) const {
  std::lock_guard lock(mu_);
  return done_.contains(key);
}

std::optional<std::vector<flow::Payload>> ProcessingLedger::outputs(const TaskNode& key) const {
  std::lock_guard lock(mu_);
  if (auto it = done_.find(key); it != done_.end()) return it->second;
  return std::nullopt;
}

bool ProcessingLedger::record(const TaskNode& key, const std::vector<flow::Payload>& outputs) {
  std::lock_guard lock(mu_);
  if (done_.contains(key)) return false;
  ordered_json out = ordered_json::array();
  for (const auto& p : outputs) out.push_back(flow::payload_to_json(p));
  ordered_json entry{{"task_id", key.first}, {"node_id", key.second}, {"outputs", std::move(out)}};
  log_->append(entry.dump());
  done_.emplace(key, outputs);
  return true;
}

std::size_t ProcessingLedger::size() const {
  std::lock_guard lock(mu_);
  return done_.size();
}

// ---------------------------------------------------------------------------

Execution execute_node(const std::string& task_id, const flow::FlowNode& node, const proc::Inputs& inputs,
                       proc::Processor& processor, ProcessingLedger& ledger) {
  TaskNode key{task_id, node.id};
  if (auto recorded = ledger.outputs(key)) return {true, std::move(*recorded)};

  std::vector<flow::Payload> outputs;
  try {
    outputs = processor.process(node, inputs);
    proc::check_outputs(processor.contract(), outputs);
  } catch (const Error& e) {
    throw Error(Errc::ExecFail, processor.contract().processor_id + ": " + std::string(to_string(e.code())) + ": " + e.detail());
  } catch (const std::exception& e) {
    throw Error(Errc::ExecFail, processor.contract().processor_id + ": " + e.what());
  }
  for (auto& p : outputs) p.producer_node = node.id;
  if (!ledger.record(key, outputs)) {
    // Another execution got there first; its outputs are the ones that count.
    return {true, *ledger.outputs(key)};
  }
  return {false, std::move(outputs)};
}

std::vector<RoutedMessage> route_outputs(const flow::TaskData& td, NodeId executed,
                                         const std::vector<flow::Payload>& outputs, const ModuleLookup& lookup) {
  std::vector<RoutedMessage> out;
  for (NodeId s : flow::successors(td.graph, executed)) {
    const flow::FlowNode* node = td.graph.find(s);
    auto desc = lookup(node->module);
    if (!desc) throw Error(Errc::UnknownModule, "successor node " + std::to_string(s) + " names unknown module " + node->module);
    bool matched = false;
    for (const auto& p : outputs) {
      if (!desc->input_datatypes.contains(p.datatype)) continue;
      matched = true;
      out.push_back({input_topic_name(desc->module_id, p.datatype), flow::TaskData{td.task_id, s, td.graph, p}});
    }
    if (!matched) {
      std::string produced;
      for (const auto& p : outputs) produced += (produced.empty() ? "" : ",") + p.datatype;
      throw Error(Errc::RouteMismatch, "successor node " + std::to_string(s) + " (module " + desc->module_id +
                                           ") accepts none of {" + produced + "}");
    }
  }
  return out;
}

store::ResultRecord result_record_of(const std::string& task_id, NodeId node, const std::string& module_id,
                                     const std::vector<flow::Payload>& outputs) {
  store::ResultRecord r{task_id, node, module_id, outputs.empty() ? "Empty" : outputs.front().datatype, {}, 0};
  for (const auto& p : outputs) r.records.insert(r.records.end(), p.records.begin(), p.records.end());
  return r;
}

}  // namespace vpe::rt
