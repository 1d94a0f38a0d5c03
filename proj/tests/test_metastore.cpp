#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <random>
#include <thread>

#include "doctest.h"
#include "support/two_input.hpp"
#include "support/generators.hpp"
#include "support/tempdir.hpp"
#include "vpe/error.hpp"
#include "vpe/metastore.hpp"

using namespace vpe;
using namespace vpe::store;

namespace {

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::BadRequest;
}

ResultRecord result(const std::string& task, flow::NodeId node, std::string module, std::size_t n_records) {
  ResultRecord r{task, node, std::move(module), "ReID-Rank", {}, 1000 + node};
  for (std::size_t i = 0; i < n_records; ++i) r.records.push_back("rec-" + std::to_string(i) + std::string(1, '\0'));
  return r;
}

FeedbackRecord selection(const std::string& task, flow::NodeId node, std::vector<int> idx) {
  FeedbackRecord f;
  f.task_id = task;
  f.node_id = node;
  f.kind = FeedbackKind::Selection;
  f.selected_record_indices = std::move(idx);
  return f;
}

FeedbackRecord satisfaction(const std::string& task, flow::NodeId node, int score) {
  FeedbackRecord f;
  f.task_id = task;
  f.node_id = node;
  f.kind = FeedbackKind::Satisfaction;
  f.satisfaction = score;
  return f;
}

}  // namespace

TEST_CASE("save_result is first-write-wins") {
  fixtures::TempDir dir;
  MetaStore store(dir.path());
  std::string task = new_uuid();
  auto first = result(task, 2, "M1", 3);
  CHECK(store.save_result(first) == SaveOutcome::Stored);
  auto second = result(task, 2, "M2", 1);
  CHECK(store.save_result(second) == SaveOutcome::Duplicate);
  auto got = store.query_results(task, 2);
  REQUIRE(got.size() == 1);
  CHECK(got[0] == first);

  CHECK(code_of([&] { store.save_result(result("nope", 0, "M", 1)); }) == Errc::BadParam);
  CHECK(code_of([&] { store.save_result(result(task, -1, "M", 1)); }) == Errc::BadParam);
}

TEST_CASE("query_results") {
  fixtures::TempDir dir;
  MetaStore store(dir.path());
  CHECK(store.query_results(new_uuid()).empty());

  std::string task = new_uuid();
  std::string other = new_uuid();
  for (flow::NodeId n : {2, 0, 1}) store.save_result(result(task, n, "M", 1));
  store.save_result(result(other, 0, "M", 1));
  auto all = store.query_results(task);
  REQUIRE(all.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(all[i].node_id == static_cast<flow::NodeId>(i));
  CHECK(store.query_results(task, 1).size() == 1);
  CHECK(store.query_results(task, 7).empty());
}

TEST_CASE("records survive reopen and a torn tail is dropped") {
  fixtures::TempDir dir;
  std::string task = new_uuid();
  auto r = result(task, 0, "M1", 4);
  {
    MetaStore store(dir.path());
    store.save_result(r);
    store.save_task({task, fixtures::two_input("A", "B", "C"), 5});
  }
  {
    std::ofstream log(dir.path() / "store.log", std::ios::binary | std::ios::app);
    log.write("\x00\x00\x10\x00{\"t\":", 9);
  }
  MetaStore store(dir.path());
  REQUIRE(store.query_results(task).size() == 1);
  CHECK(store.query_results(task)[0] == r);
  CHECK(store.get_task(task)->graph == fixtures::two_input("A", "B", "C"));
  CHECK(store.save_result(result(task, 1, "M1", 1)) == SaveOutcome::Stored);
  MetaStore again(dir.path());
  CHECK(again.query_results(task).size() == 2);
}

TEST_CASE("a STORED record survives SIGKILL of the store process") {
  fixtures::TempDir dir;
  std::string task = new_uuid();
  int ready[2];
  REQUIRE(::pipe(ready) == 0);
  pid_t child = ::fork();
  REQUIRE(child >= 0);
  if (child == 0) {
    MetaStore store(dir.path());
    for (flow::NodeId n = 0; n < 50; ++n) store.save_result(result(task, n, "M", static_cast<std::size_t>(n % 4)));
    char ok = 1;
    (void)!::write(ready[1], &ok, 1);
    ::pause();
    ::_exit(0);
  }
  char ok = 0;
  REQUIRE(::read(ready[0], &ok, 1) == 1);
  ::kill(child, SIGKILL);
  ::waitpid(child, nullptr, 0);
  ::close(ready[0]);
  ::close(ready[1]);

  MetaStore store(dir.path());
  auto all = store.query_results(task);
  REQUIRE(all.size() == 50);
  for (flow::NodeId n = 0; n < 50; ++n) CHECK(all[static_cast<std::size_t>(n)] == result(task, n, "M", static_cast<std::size_t>(n % 4)));
}

TEST_CASE("concurrent duplicate saves: exactly one STORED") {
  fixtures::TempDir dir;
  MetaStore store(dir.path());
  for (int round = 0; round < 20; ++round) {
    std::string task = new_uuid();
    constexpr int kRacers = 8;
    std::vector<ResultRecord> inputs;
    for (int i = 0; i < kRacers; ++i) inputs.push_back(result(task, 3, "M" + std::to_string(i), static_cast<std::size_t>(i)));
    std::vector<SaveOutcome> outcomes(kRacers);
    std::vector<std::thread> racers;
    for (int i = 0; i < kRacers; ++i) {
      racers.emplace_back([&, i] { outcomes[static_cast<std::size_t>(i)] = store.save_result(inputs[static_cast<std::size_t>(i)]); });
    }
    for (auto& t : racers) t.join();
    int stored = 0;
    int winner = -1;
    for (int i = 0; i < kRacers; ++i) {
      if (outcomes[static_cast<std::size_t>(i)] == SaveOutcome::Stored) {
        ++stored;
        winner = i;
      }
    }
    REQUIRE(stored == 1);
    CHECK(store.query_results(task, 3).at(0) == inputs[static_cast<std::size_t>(winner)]);
  }
}

TEST_CASE("save_feedback checks references, indices and kind fields") {
  fixtures::TempDir dir;
  MetaStore store(dir.path());
  std::string task = new_uuid();
  store.save_result(result(task, 0, "M", 1));
  store.save_result(result(task, 1, "M", 3));

  auto saved = store.save_feedback(selection(task, 0, {0}));
  CHECK(is_uuid(saved.feedback_id));
  CHECK(saved.created_at > 0);
  CHECK(code_of([&] { store.save_feedback(selection(task, 1, {5})); }) == Errc::BadIndex);
  CHECK(code_of([&] { store.save_feedback(selection(task, 1, {-1})); }) == Errc::BadIndex);
  CHECK(code_of([&] { store.save_feedback(selection(new_uuid(), 0, {0})); }) == Errc::NoResult);
  CHECK(code_of([&] { store.save_feedback(selection(task, 9, {0})); }) == Errc::NoResult);
  CHECK(code_of([&] { store.save_feedback(satisfaction(task, 0, 9)); }) == Errc::BadParam);
  CHECK(code_of([&] { store.save_feedback(satisfaction(task, 0, 0)); }) == Errc::BadParam);
  CHECK(store.save_feedback(satisfaction(task, 0, 5)).satisfaction == 5);

  auto mixed = satisfaction(task, 0, 3);
  mixed.revision = "x";
  CHECK(code_of([&] { store.save_feedback(mixed); }) == Errc::BadParam);
  FeedbackRecord empty_revision;
  empty_revision.task_id = task;
  empty_revision.kind = FeedbackKind::Revision;
  CHECK(code_of([&] { store.save_feedback(empty_revision); }) == Errc::BadParam);
  empty_revision.revision = std::string("\x01\x02", 2);
  CHECK(store.save_feedback(empty_revision).revision == std::string("\x01\x02", 2));

  // Re-sending a known feedback_id does not append a second copy.
  store.save_feedback(saved);
  CHECK(store.export_feedback({}).size() == 3);
}

TEST_CASE("export_feedback equals a brute-force filter") {
  fixtures::TempDir dir;
  gen::Rng rng(2024);
  std::vector<FeedbackRecord> saved;
  std::map<std::pair<std::string, flow::NodeId>, std::string> owner;
  {
    MetaStore store(dir.path());
    std::vector<std::string> modules{"M1", "M2", "M3"};
    std::vector<std::pair<std::string, flow::NodeId>> keys;
    for (int t = 0; t < 4; ++t) {
      std::string task = new_uuid();
      for (flow::NodeId n = 0; n < 3; ++n) {
        std::string module = modules[rng() % modules.size()];
        store.save_result(result(task, n, module, 1 + rng() % 4));
        keys.emplace_back(task, n);
        owner[{task, n}] = module;
      }
    }
    for (int i = 0; i < 40; ++i) {
      auto [task, node] = keys[rng() % keys.size()];
      FeedbackRecord f;
      f.task_id = task;
      f.node_id = node;
      f.created_at = 100 + static_cast<std::int64_t>(rng() % 20);
      switch (rng() % 3) {
        case 0:
          f.kind = FeedbackKind::Satisfaction;
          f.satisfaction = 1 + static_cast<int>(rng() % 5);
          break;
        case 1:
          f.kind = FeedbackKind::Selection;
          f.selected_record_indices = std::vector<int>{0};
          break;
        default:
          f.kind = FeedbackKind::Revision;
          f.revision = gen::bytes(rng, 8);
      }
      saved.push_back(store.save_feedback(f));
    }
  }
  MetaStore store(dir.path());  // exports read the rebuilt index

  std::vector<std::optional<std::string>> module_filters{std::nullopt, "M1", "M2", "M3", "M9"};
  std::vector<std::optional<FeedbackKind>> kind_filters{std::nullopt, FeedbackKind::Satisfaction, FeedbackKind::Selection,
                                                        FeedbackKind::Revision};
  std::vector<std::optional<std::int64_t>> since_filters{std::nullopt, 105, 119, 200};
  for (const auto& m : module_filters) {
    for (const auto& k : kind_filters) {
      for (const auto& s : since_filters) {
        std::vector<FeedbackRecord> expected;
        for (const auto& f : saved) {
          if (m && owner[{f.task_id, f.node_id}] != *m) continue;
          if (k && f.kind != *k) continue;
          if (s && f.created_at < *s) continue;
          expected.push_back(f);
        }
        // Insertion sort by created_at keeps save order among ties.
        for (std::size_t i = 1; i < expected.size(); ++i) {
          for (std::size_t j = i; j > 0 && expected[j].created_at < expected[j - 1].created_at; --j) {
            std::swap(expected[j], expected[j - 1]);
          }
        }
        CHECK(store.export_feedback({m, k, s}) == expected);
      }
    }
  }
  for (const auto& f : store.export_feedback({})) CHECK(store.query_results(f.task_id, f.node_id).size() == 1);
}

TEST_CASE("json forms round-trip") {
  gen::Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    ResultRecord r{gen::uuid(rng), static_cast<flow::NodeId>(rng() % 100), gen::token(rng, 6), gen::token(rng, 8), {}, static_cast<std::int64_t>(rng() % 100000)};
    for (std::size_t k = rng() % 4; k > 0; --k) r.records.push_back(gen::bytes(rng, 12));
    CHECK(result_from_json(nlohmann::json::parse(result_to_json(r).dump())) == r);

    FeedbackRecord f = selection(gen::uuid(rng), 1, {0, 2});
    f.feedback_id = gen::uuid(rng);
    f.created_at = 7;
    CHECK(feedback_from_json(nlohmann::json::parse(feedback_to_json(f).dump())) == f);
  }
  CHECK(code_of([] { feedback_from_json(nlohmann::json{{"task_id", "x"}, {"node_id", 0}, {"kind", "LIKE"}}); }) ==
        Errc::BadParam);
  CHECK(code_of([] { result_from_json(nlohmann::json::array()); }) == Errc::BadParam);
}

TEST_CASE("remote store speaks the same contract") {
  fixtures::TempDir dir;
  MetaStore local(dir.path());
  StoreServer server(local, "127.0.0.1", 0);
  RemoteStore store(Endpoint{"127.0.0.1", server.port()});

  std::string task = new_uuid();
  auto r = result(task, 1, "M1", 3);
  CHECK(store.save_result(r) == SaveOutcome::Stored);
  CHECK(store.save_result(r) == SaveOutcome::Duplicate);
  CHECK(store.query_results(task) == std::vector<ResultRecord>{r});
  CHECK(store.query_results(task, 0).empty());

  auto fb = store.save_feedback(selection(task, 1, {2, 0}));
  CHECK(fb.selected_record_indices == std::vector<int>{2, 0});
  CHECK(code_of([&] { store.save_feedback(selection(task, 1, {3})); }) == Errc::BadIndex);
  CHECK(code_of([&] { store.save_feedback(selection(task, 4, {0})); }) == Errc::NoResult);
  CHECK(store.export_feedback({"M1", FeedbackKind::Selection, std::nullopt}) == std::vector<FeedbackRecord>{fb});
  CHECK(store.export_feedback({"M2", std::nullopt, std::nullopt}).empty());

  CHECK_FALSE(store.get_task(task).has_value());
  TaskRecord t{task, fixtures::two_input("A", "B", "C"), 0};
  store.save_task(t);
  auto got = store.get_task(task);
  REQUIRE(got.has_value());
  CHECK(got->graph == t.graph);
  CHECK(got->created_at > 0);
  server.stop();
}
