#include "vpe/metastore.hpp"

#include <algorithm>
#include <set>

#include <spdlog/spdlog.h>

#include "fileio.hpp"
#include "vpe/codec.hpp"
#include "vpe/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace vpe::store {

namespace {

[[noreturn]] void bad(const std::string& what) { throw Error(Errc::BadParam, what); }

const json& field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) bad(std::string("missing field '") + key + "'");
  return *it;
}

std::string string_field(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_string()) bad(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

std::int64_t int_field(const json& j, const char* key) {
  const auto& v = field(j, key);
  if (!v.is_number_integer()) bad(std::string("field '") + key + "' must be an integer");
  return v.get<std::int64_t>();
}

flow::NodeId node_field(const json& j, const char* key) {
  auto v = int_field(j, key);
  if (v < 0 || v > INT32_MAX) bad(std::string("field '") + key + "' out of range");
  return static_cast<flow::NodeId>(v);
}

Bytes unbase64(const json& v, const char* what) {
  if (!v.is_string()) bad(std::string(what) + " must be a base64 string");
  auto raw = base64_decode(v.get<std::string>());
  if (!raw) bad(std::string(what) + " is not valid base64");
  return *raw;
}

void check_result(const ResultRecord& r) {
  if (!is_uuid(r.task_id)) bad("task_id '" + r.task_id + "' is not a UUID");
  if (r.node_id < 0) bad("negative node_id");
  if (!is_token(r.module_id)) bad("module_id '" + r.module_id + "' is not a token");
  if (!is_token(r.datatype)) bad("datatype '" + r.datatype + "' is not a token");
}

}  // namespace

std::string to_string(FeedbackKind kind) {
  switch (kind) {
    case FeedbackKind::Satisfaction:
      return "SATISFACTION";
    case FeedbackKind::Selection:
      return "SELECTION";
    case FeedbackKind::Revision:
      return "REVISION";
  }
  return "?";
}

FeedbackKind feedback_kind_from_string(std::string_view text) {
  if (text == "SATISFACTION") return FeedbackKind::Satisfaction;
  if (text == "SELECTION") return FeedbackKind::Selection;
  if (text == "REVISION") return FeedbackKind::Revision;
  bad("unknown feedback kind '" + std::string(text) + "'");
}

ordered_json result_to_json(const ResultRecord& r) {
  ordered_json records = ordered_json::array();
  for (const auto& rec : r.records) records.push_back(base64_encode(rec));
  return {{"task_id", r.task_id},   {"node_id", r.node_id},          {"module_id", r.module_id},
          {"datatype", r.datatype}, {"records", std::move(records)}, {"created_at", r.created_at}};
}

ResultRecord result_from_json(const json& j) {
  if (!j.is_object()) bad("result must be an object");
  ResultRecord r;
  r.task_id = string_field(j, "task_id");
  r.node_id = node_field(j, "node_id");
  r.module_id = string_field(j, "module_id");
  r.datatype = string_field(j, "datatype");
  const auto& records = field(j, "records");
  if (!records.is_array()) bad("records must be an array");
  for (const auto& rec : records) r.records.push_back(unbase64(rec, "record"));
  if (j.contains("created_at")) r.created_at = int_field(j, "created_at");
  return r;
}

ordered_json feedback_to_json(const FeedbackRecord& f) {
  ordered_json j{{"feedback_id", f.feedback_id}, {"task_id", f.task_id}, {"node_id", f.node_id}, {"kind", to_string(f.kind)}};
  if (f.satisfaction) j["satisfaction"] = *f.satisfaction;
  if (f.selected_record_indices) j["selected_record_indices"] = *f.selected_record_indices;
  if (f.revision) j["revision"] = base64_encode(*f.revision);
  j["created_at"] = f.created_at;
  return j;
}

FeedbackRecord feedback_from_json(const json& j) {
  if (!j.is_object()) bad("feedback must be an object");
  FeedbackRecord f;
  if (j.contains("feedback_id")) f.feedback_id = string_field(j, "feedback_id");
  f.task_id = string_field(j, "task_id");
  f.node_id = node_field(j, "node_id");
  f.kind = feedback_kind_from_string(string_field(j, "kind"));
  if (j.contains("satisfaction") && !j["satisfaction"].is_null()) {
    f.satisfaction = static_cast<int>(std::clamp<std::int64_t>(int_field(j, "satisfaction"), INT32_MIN, INT32_MAX));
  }
  if (j.contains("selected_record_indices") && !j["selected_record_indices"].is_null()) {
    const auto& idx = j["selected_record_indices"];
    if (!idx.is_array()) bad("selected_record_indices must be an array");
    std::vector<int> out;
    for (const auto& i : idx) {
      if (!i.is_number_integer()) bad("selected_record_indices must hold integers");
      out.push_back(static_cast<int>(std::clamp<std::int64_t>(i.get<std::int64_t>(), INT32_MIN, INT32_MAX)));
    }
    f.selected_record_indices = std::move(out);
  }
  if (j.contains("revision") && !j["revision"].is_null()) f.revision = unbase64(j["revision"], "revision");
  if (j.contains("created_at")) f.created_at = int_field(j, "created_at");
  return f;
}

ordered_json task_to_json(const TaskRecord& t) {
  return {{"task_id", t.task_id}, {"graph", flow::graph_to_json(t.graph)}, {"created_at", t.created_at}};
}

TaskRecord task_from_json(const json& j) {
  if (!j.is_object()) bad("task must be an object");
  TaskRecord t;
  t.task_id = string_field(j, "task_id");
  try {
    t.graph = flow::graph_from_json(field(j, "graph"));
  } catch (const Error& e) {
    bad(e.detail());
  }
  if (j.contains("created_at")) t.created_at = int_field(j, "created_at");
  return t;
}

// ---------------------------------------------------------------------------

MetaStore::MetaStore(fs::path dir, MetaStoreOptions options) : dir_(std::move(dir)), options_(options) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error(Errc::IoFail, "cannot create store directory " + dir_.string() + ": " + ec.message());
  log_ = std::make_unique<io::RecordLog>(dir_ / "store.log", options_.fsync, [this](std::string_view rec) {
    try {
      apply(json::parse(rec));
    } catch (const std::exception& e) {
      spdlog::warn("store: skipping unreadable log entry: {}", e.what());
    }
  });
}

MetaStore::~MetaStore() = default;

void MetaStore::apply(const json& entry) {
  const auto& type = entry.at("t").get_ref<const std::string&>();
  if (type == "result") {
    auto r = result_from_json(entry.at("r"));
    results_.try_emplace({r.task_id, r.node_id}, std::move(r));
  } else if (type == "feedback") {
    feedback_.push_back(feedback_from_json(entry.at("f")));
  } else if (type == "task") {
    auto t = task_from_json(entry.at("task"));
    tasks_.try_emplace(t.task_id, std::move(t));
  }
}

void MetaStore::append(const ordered_json& entry) { log_->append(entry.dump()); }

SaveOutcome MetaStore::save_result(const ResultRecord& r) {
  check_result(r);
  ResultRecord stored = r;
  if (stored.created_at == 0) stored.created_at = now_ms();
  std::unique_lock lock(mu_);
  if (results_.contains({r.task_id, r.node_id})) return SaveOutcome::Duplicate;
  append({{"t", "result"}, {"r", result_to_json(stored)}});
  results_.emplace(std::make_pair(r.task_id, r.node_id), std::move(stored));
  return SaveOutcome::Stored;
}

std::vector<ResultRecord> MetaStore::query_results(const std::string& task_id, std::optional<flow::NodeId> node) {
  std::shared_lock lock(mu_);
  std::vector<ResultRecord> out;
  if (node) {
    if (auto it = results_.find({task_id, *node}); it != results_.end()) out.push_back(it->second);
    return out;
  }
  for (auto it = results_.lower_bound({task_id, INT32_MIN}); it != results_.end() && it->first.first == task_id; ++it) {
    out.push_back(it->second);
  }
  return out;
}

FeedbackRecord MetaStore::save_feedback(FeedbackRecord f) {
  if (!is_uuid(f.task_id)) bad("task_id '" + f.task_id + "' is not a UUID");
  if (f.feedback_id.empty()) f.feedback_id = new_uuid();
  if (!is_uuid(f.feedback_id)) bad("feedback_id '" + f.feedback_id + "' is not a UUID");
  if (f.created_at == 0) f.created_at = now_ms();

  bool want_sat = f.kind == FeedbackKind::Satisfaction;
  bool want_sel = f.kind == FeedbackKind::Selection;
  bool want_rev = f.kind == FeedbackKind::Revision;
  if (want_sat != f.satisfaction.has_value() || want_sel != f.selected_record_indices.has_value() ||
      want_rev != f.revision.has_value()) {
    bad("fields do not match feedback kind " + to_string(f.kind));
  }
  if (f.satisfaction && (*f.satisfaction < 1 || *f.satisfaction > 5)) {
    bad("satisfaction " + std::to_string(*f.satisfaction) + " outside 1..5");
  }

  std::unique_lock lock(mu_);
  auto it = results_.find({f.task_id, f.node_id});
  if (it == results_.end()) {
    throw Error(Errc::NoResult, "no result for task " + f.task_id + " node " + std::to_string(f.node_id));
  }
  if (f.selected_record_indices) {
    auto n = static_cast<int>(it->second.records.size());
    for (int i : *f.selected_record_indices) {
      if (i < 0 || i >= n) {
        throw Error(Errc::BadIndex, "record index " + std::to_string(i) + " outside [0, " + std::to_string(n) + ")");
      }
    }
  }
  for (const auto& existing : feedback_) {
    if (existing.feedback_id == f.feedback_id) return existing;
  }
  append({{"t", "feedback"}, {"f", feedback_to_json(f)}});
  feedback_.push_back(f);
  return f;
}

std::vector<FeedbackRecord> MetaStore::export_feedback(const FeedbackFilter& filter) {
  std::shared_lock lock(mu_);
  std::vector<FeedbackRecord> out;
  for (const auto& f : feedback_) {
    if (filter.kind && f.kind != *filter.kind) continue;
    if (filter.since && f.created_at < *filter.since) continue;
    if (filter.module_id) {
      auto it = results_.find({f.task_id, f.node_id});
      if (it == results_.end() || it->second.module_id != *filter.module_id) continue;
    }
    out.push_back(f);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.created_at < b.created_at; });
  return out;
}

void MetaStore::save_task(const TaskRecord& t) {
  if (!is_uuid(t.task_id)) bad("task_id '" + t.task_id + "' is not a UUID");
  TaskRecord stored = t;
  if (stored.created_at == 0) stored.created_at = now_ms();
  std::unique_lock lock(mu_);
  if (tasks_.contains(t.task_id)) return;
  append({{"t", "task"}, {"task", task_to_json(stored)}});
  tasks_.emplace(t.task_id, std::move(stored));
}

std::optional<TaskRecord> MetaStore::get_task(const std::string& task_id) {
  std::shared_lock lock(mu_);
  if (auto it = tasks_.find(task_id); it != tasks_.end()) return it->second;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// TCP protocol

namespace {

class StoreSession final : public net::Session {
 public:
  explicit StoreSession(Store& store) : store_(store) {}

  net::Frame handle(const net::Frame& req) override {
    json reply;
    try {
      reply = dispatch(static_cast<StoreOp>(req.opcode), json::parse(req.body));
    } catch (const Error& e) {
      reply = net::error_reply(to_string(e.code()), e.detail());
    } catch (const json::exception& e) {
      reply = net::error_reply("BAD_REQUEST", e.what());
    }
    return {req.opcode, reply.dump()};
  }

 private:
  json dispatch(StoreOp op, const json& body) {
    switch (op) {
      case StoreOp::SaveResult: {
        auto outcome = store_.save_result(result_from_json(body.at("result")));
        return net::ok_reply({{"outcome", outcome == SaveOutcome::Stored ? "STORED" : "DUPLICATE"}});
      }
      case StoreOp::Query: {
        std::optional<flow::NodeId> node;
        if (body.contains("node_id") && !body["node_id"].is_null()) node = body["node_id"].get<flow::NodeId>();
        json results = json::array();
        for (const auto& r : store_.query_results(body.at("task_id").get<std::string>(), node)) {
          results.push_back(json(result_to_json(r)));
        }
        return net::ok_reply({{"results", std::move(results)}});
      }
      case StoreOp::SaveFeedback:
        return net::ok_reply({{"feedback", feedback_to_json(store_.save_feedback(feedback_from_json(body.at("feedback"))))}});
      case StoreOp::Export: {
        FeedbackFilter filter;
        if (body.contains("module_id")) filter.module_id = body["module_id"].get<std::string>();
        if (body.contains("kind")) filter.kind = feedback_kind_from_string(body["kind"].get<std::string>());
        if (body.contains("since")) filter.since = body["since"].get<std::int64_t>();
        json out = json::array();
        for (const auto& f : store_.export_feedback(filter)) out.push_back(json(feedback_to_json(f)));
        return net::ok_reply({{"feedback", std::move(out)}});
      }
      case StoreOp::SaveTask:
        store_.save_task(task_from_json(body.at("task")));
        return net::ok_reply();
      case StoreOp::GetTask: {
        auto t = store_.get_task(body.at("task_id").get<std::string>());
        return net::ok_reply({{"task", t ? json(task_to_json(*t)) : json(nullptr)}});
      }
    }
    throw Error(Errc::BadRequest, "unknown opcode");
  }

  Store& store_;
};

}  // namespace

StoreServer::StoreServer(Store& store, std::string host, std::uint16_t port)
    : server_(std::move(host), port, [&store] { return std::make_unique<StoreSession>(store); }) {}

SaveOutcome RemoteStore::save_result(const ResultRecord& r) {
  auto reply = client_.call(static_cast<std::uint8_t>(StoreOp::SaveResult), {{"result", result_to_json(r)}});
  return reply.at("outcome") == "STORED" ? SaveOutcome::Stored : SaveOutcome::Duplicate;
}

std::vector<ResultRecord> RemoteStore::query_results(const std::string& task_id, std::optional<flow::NodeId> node) {
  json body{{"task_id", task_id}};
  if (node) body["node_id"] = *node;
  auto reply = client_.call(static_cast<std::uint8_t>(StoreOp::Query), body);
  std::vector<ResultRecord> out;
  for (const auto& r : reply.at("results")) out.push_back(result_from_json(r));
  return out;
}

FeedbackRecord RemoteStore::save_feedback(FeedbackRecord f) {
  auto reply = client_.call(static_cast<std::uint8_t>(StoreOp::SaveFeedback), {{"feedback", feedback_to_json(f)}});
  return feedback_from_json(reply.at("feedback"));
}

std::vector<FeedbackRecord> RemoteStore::export_feedback(const FeedbackFilter& filter) {
  json body = json::object();
  if (filter.module_id) body["module_id"] = *filter.module_id;
  if (filter.kind) body["kind"] = to_string(*filter.kind);
  if (filter.since) body["since"] = *filter.since;
  auto reply = client_.call(static_cast<std::uint8_t>(StoreOp::Export), body);
  std::vector<FeedbackRecord> out;
  for (const auto& f : reply.at("feedback")) out.push_back(feedback_from_json(f));
  return out;
}

void RemoteStore::save_task(const TaskRecord& t) {
  client_.call(static_cast<std::uint8_t>(StoreOp::SaveTask), {{"task", task_to_json(t)}});
}

std::optional<TaskRecord> RemoteStore::get_task(const std::string& task_id) {
  auto reply = client_.call(static_cast<std::uint8_t>(StoreOp::GetTask), {{"task_id", task_id}});
  if (reply.at("task").is_null()) return std::nullopt;
  return task_from_json(reply.at("task"));
}

}  // namespace vpe::store
