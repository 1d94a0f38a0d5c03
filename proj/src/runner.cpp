#include "vpe/runner.hpp"

#include <algorithm>

#include <spdlog/spdlog.h>

#include "vpe/codec.hpp"
#include "vpe/error.hpp"

using nlohmann::ordered_json;

namespace vpe::rt {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::AfterPoll:
      return "after-poll";
    case Stage::AfterExecute:
      return "after-execute";
    case Stage::AfterPublish:
      return "after-publish";
  }
  return "?";
}

std::optional<Stage> stage_from_string(std::string_view text) {
  for (Stage s : {Stage::AfterPoll, Stage::AfterExecute, Stage::AfterPublish}) {
    if (text == to_string(s)) return s;
  }
  return std::nullopt;
}

namespace {

std::string describe(const Error& e) { return std::string(to_string(e.code())) + ": " + e.detail(); }

}  // namespace

ModuleRunner::ModuleRunner(ModuleDescriptor descriptor, bus::Bus& bus, store::Store& store,
                           std::shared_ptr<proc::Processor> processor, ModuleLookup lookup, ProcessingLedger& ledger,
                           RunnerOptions options)
    : descriptor_(std::move(descriptor)),
      bus_(bus),
      store_(store),
      processor_(std::move(processor)),
      lookup_(std::move(lookup)),
      ledger_(ledger),
      options_(std::move(options)) {
  check_descriptor(descriptor_);
  for (const auto& d : descriptor_.input_datatypes) {
    if (!processor_->contract().accepts.contains(d)) {
      throw Error(Errc::BadParam, "processor " + processor_->contract().processor_id + " does not accept " + d);
    }
  }
  for (const auto& t : descriptor_.owned_topics()) bus_.create_topic(t);
  bus_.create_topic(dead_letter_topic(descriptor_.module_id));
}

ModuleRunner::~ModuleRunner() { stop(); }

void ModuleRunner::start() {
  std::lock_guard lock(run_mu_);
  if (!loops_.empty()) return;
  stopping_ = false;
  for (const auto& topic : descriptor_.owned_topics()) loops_.emplace_back([this, topic] { loop(topic); });
}

void ModuleRunner::stop() {
  std::lock_guard lock(run_mu_);
  stopping_ = true;
  for (auto& t : loops_) t.join();
  loops_.clear();
  run_cv_.notify_all();
}

void ModuleRunner::run() {
  start();
  std::unique_lock lock(run_mu_);
  run_cv_.wait(lock, [&] { return stopping_.load(); });
}

void ModuleRunner::stage(Stage s) {
  if (options_.on_stage) options_.on_stage(s);
}

void ModuleRunner::loop(const std::string& topic) {
  const auto ttl = options_.accumulator_ttl.count();
  std::unique_ptr<bus::Consumer> consumer;
  bus::Offset committed = 0;
  std::int64_t next_eviction = now_ms() + std::max<std::int64_t>(ttl / 10, 10);

  while (!stopping_) {
    bool retry = false;
    try {
      if (!consumer) {
        consumer = bus_.subscribe(topic, descriptor_.module_id);
        committed = consumer->position();
      }
      auto batch = consumer->poll(options_.batch_size, options_.poll_timeout);
      if (!batch.empty()) stage(Stage::AfterPoll);
      if (options_.reorganize) batch = options_.reorganize(std::move(batch));

      bus::Offset watermark = consumer->position();
      for (std::size_t i = 0; i < batch.size(); ++i) {
        try {
          handle(batch[i], topic);
        } catch (const Error& e) {
          spdlog::warn("{}: {} offset {}: {}; will retry", descriptor_.module_id, topic, batch[i].offset, describe(e));
          for (std::size_t j = i; j < batch.size(); ++j) watermark = std::min(watermark, batch[j].offset);
          retry = true;
          break;
        }
      }

      if (auto pinned = accumulator_.lowest_pinned(topic)) watermark = std::min(watermark, *pinned);
      if (watermark > committed) {
        consumer->commit(watermark);
        committed = watermark;
      }
    } catch (const Error& e) {
      spdlog::warn("{}: {}: {}", descriptor_.module_id, topic, describe(e));
      retry = true;
    }

    if (retry) {
      // Rewind to the committed offset so the failed message is redelivered.
      if (consumer) consumer->close();
      consumer.reset();
      std::this_thread::sleep_for(options_.retry_backoff);
    }

    if (now_ms() >= next_eviction) {
      next_eviction = now_ms() + std::max<std::int64_t>(ttl / 10, 10);
      for (const auto& e : accumulator_.evict_older_than(now_ms() - ttl)) {
        spdlog::warn("{}: task {} node {} stalled waiting for inputs; dropped", descriptor_.module_id, e.task_id, e.node_id);
        if (options_.observer) options_.observer->on_stalled(e);
      }
    }
  }
}

void ModuleRunner::handle(const bus::BusMessage& m, const std::string& topic) {
  flow::TaskData td;
  try {
    td = flow::decode_taskdata(m.value);
  } catch (const Error& e) {
    dead_letter(m, topic, describe(e));
    return;
  }
  if (td.task_id != m.key) {
    dead_letter(m, topic, "DECODE_INVALID: message key " + m.key + " differs from task_id " + td.task_id);
    return;
  }
  const flow::FlowNode* node = nullptr;
  try {
    node = &flow::locate_self(td, descriptor_.module_id);
  } catch (const Error& e) {
    dead_letter(m, topic, describe(e));
    return;
  }
  if (input_topic_name(descriptor_.module_id, td.payload.datatype) != topic) {
    dead_letter(m, topic, "MISROUTED: payload datatype " + td.payload.datatype + " does not belong on " + topic);
    return;
  }
  if (options_.observer) options_.observer->on_arrival(td);

  TaskNode key{td.task_id, td.nme};
  Accumulator::Result acc;
  try {
    acc = accumulator_.accumulate(td, {topic, m.offset}, now_ms(), [&] { return ledger_.contains(key); });
  } catch (const Error& e) {
    dead_letter(m, topic, describe(e));
    return;
  }

  if (acc.outcome == Accumulator::Outcome::Pending) return;

  if (acc.outcome == Accumulator::Outcome::Done) {
    // Already executed (for example, killed before publishing): send the
    // recorded outputs again; successors drop duplicates through their ledgers.
    if (options_.observer) options_.observer->on_resend(key.first, key.second);
    try {
      emit(td, *node, *ledger_.outputs(key));
    } catch (const Error& e) {
      if (e.code() != Errc::RouteMismatch && e.code() != Errc::UnknownModule) throw;
      dead_letter(m, topic, describe(e));
    }
    stage(Stage::AfterPublish);
    return;
  }

  try {
    Execution ex;
    if (processor_->contract().single_threaded) {
      std::lock_guard lock(exec_mu_);
      ex = execute_node(td.task_id, *node, acc.inputs, *processor_, ledger_);
    } else {
      ex = execute_node(td.task_id, *node, acc.inputs, *processor_, ledger_);
    }
    if (options_.observer) {
      if (ex.skipped) {
        options_.observer->on_resend(key.first, key.second);
      } else {
        options_.observer->on_execute(key.first, key.second, acc.inputs);
      }
    }
    stage(Stage::AfterExecute);
    try {
      emit(td, *node, ex.outputs);
    } catch (const Error& e) {
      if (e.code() != Errc::RouteMismatch && e.code() != Errc::UnknownModule) throw;
      dead_letter(m, topic, describe(e));
    }
    stage(Stage::AfterPublish);
  } catch (const Error& e) {
    if (e.code() == Errc::ExecFail) {
      int attempts = 0;
      {
        std::lock_guard lock(attempts_mu_);
        attempts = ++attempts_[key];
        if (attempts >= options_.max_exec_attempts) attempts_.erase(key);
      }
      if (attempts >= options_.max_exec_attempts) {
        dead_letter(m, topic, describe(e) + " (after " + std::to_string(attempts) + " attempts)");
        accumulator_.finish(key);
        return;
      }
    }
    accumulator_.reopen(key);
    throw;
  }
  accumulator_.finish(key);
  std::lock_guard lock(attempts_mu_);
  attempts_.erase(key);
}

void ModuleRunner::emit(const flow::TaskData& td, const flow::FlowNode& node, const std::vector<flow::Payload>& outputs) {
  store_.save_result(result_record_of(td.task_id, node.id, descriptor_.module_id, outputs));
  for (const auto& r : route_outputs(td, node.id, outputs, lookup_)) {
    publish(r.topic, td.task_id, flow::encode_taskdata(r.td));
    if (options_.observer) options_.observer->on_publish(r.topic, r.td);
  }
}

void ModuleRunner::publish(const std::string& topic, const std::string& key, const Bytes& value) {
  bool known = false;
  {
    std::lock_guard lock(topics_mu_);
    known = known_topics_.contains(topic);
  }
  if (!known) {
    bus_.create_topic(topic);
    std::lock_guard lock(topics_mu_);
    known_topics_.insert(topic);
  }
  bus_.publish(topic, key, value);
}

void ModuleRunner::dead_letter(const bus::BusMessage& m, const std::string& topic, const std::string& reason) {
  spdlog::warn("{}: dead-lettering {} offset {}: {}", descriptor_.module_id, topic, m.offset, reason);
  ordered_json letter{{"reason", reason}, {"topic", topic}, {"offset", m.offset}, {"value", base64_encode(m.value)}};
  bus_.publish(dead_letter_topic(descriptor_.module_id), m.key, letter.dump());
  if (options_.observer) options_.observer->on_dead_letter(topic, m.offset, reason);
}

}  // namespace vpe::rt
