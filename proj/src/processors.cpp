#include "vpe/processors.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <functional>
#include <random>

#include "json.hpp"

namespace vpe::proc {

using nlohmann::json;
using flow::Payload;

namespace {

constexpr int kObjectPool = 12;
constexpr int kMaxObjectsPerFrame = 4;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

void require_type(const Payload& p, std::string_view datatype) {
  if (p.datatype != datatype) {
    throw Error(Errc::TypeMismatch, "expected " + std::string(datatype) + " input, got " + p.datatype);
  }
}

json parse_record(const Bytes& raw, std::string_view datatype) {
  auto j = json::parse(raw, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw Error(Errc::TypeMismatch, "record is not a " + std::string(datatype) + " JSON object");
  }
  return j;
}

template <typename T>
T field(const json& j, const char* key, std::string_view datatype) {
  auto it = j.find(key);
  if (it == j.end()) throw Error(Errc::TypeMismatch, std::string(datatype) + " record lacks '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw Error(Errc::TypeMismatch, std::string(datatype) + " record field '" + key + "' has the wrong type");
  }
}

std::int64_t parse_int(std::string_view text, std::string_view what) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw Error(Errc::BadParam, std::string(what) + " '" + std::string(text) + "' is not an integer");
  }
  return v;
}

std::set<std::string> split_attributes(std::string_view text) {
  std::set<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto bar = text.find('|', start);
    auto part = text.substr(start, bar == std::string_view::npos ? std::string_view::npos : bar - start);
    if (!part.empty()) out.emplace(part);
    if (bar == std::string_view::npos) break;
    start = bar + 1;
  }
  return out;
}

/// Records of every input, in ascending producer order, after checking they
/// all carry `datatype`.
Payload merged(const Inputs& inputs, std::string_view datatype) {
  Payload out{std::string(datatype), {}, flow::kSourceProducer};
  for (const auto& [producer, p] : inputs) {
    require_type(p, datatype);
    out.records.insert(out.records.end(), p.records.begin(), p.records.end());
  }
  return out;
}

class FunctionProcessor final : public Processor {
 public:
  using Fn = std::function<std::vector<Payload>(const flow::FlowNode&, const Inputs&)>;

  FunctionProcessor(ProcessorContract contract, Fn fn) : contract_(std::move(contract)), fn_(std::move(fn)) {}

  const ProcessorContract& contract() const override { return contract_; }
  std::vector<Payload> process(const flow::FlowNode& node, const Inputs& inputs) override { return fn_(node, inputs); }

 private:
  ProcessorContract contract_;
  Fn fn_;
};

}  // namespace

std::vector<SyntheticFrame> generate_frames(int count, std::uint64_t seed) {
  if (count < 0) throw Error(Errc::BadParam, "count must be >= 0");
  std::mt19937_64 rng(seed);
  std::vector<SyntheticFrame> frames;
  frames.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SyntheticFrame f;
    f.frame_index = i;
    auto n = static_cast<int>(rng() % (kMaxObjectsPerFrame + 1));
    std::set<int> used;
    while (static_cast<int>(used.size()) < n) used.insert(static_cast<int>(rng() % kObjectPool));
    for (int id : used) {
      SceneObject o;
      o.id = id;
      o.x = static_cast<int>(rng() % 256);
      o.y = static_cast<int>(rng() % 256);
      o.label = id % 4 == 3 ? "vehicle" : "person";
      f.objects.push_back(std::move(o));
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

Payload frame_source(int count, std::uint64_t seed) {
  Payload out{"Frame", {}, flow::kSourceProducer};
  for (const auto& f : generate_frames(count, seed)) {
    json objects = json::array();
    for (const auto& o : f.objects) objects.push_back({{"id", o.id}, {"label", o.label}, {"x", o.x}, {"y", o.y}});
    out.records.push_back(json{{"frame_index", f.frame_index}, {"objects", std::move(objects)}}.dump());
  }
  return out;
}

Payload detect(const Payload& frames, bool v2) {
  require_type(frames, "Frame");
  Payload out{"Pedestrian-BBox", {}, flow::kSourceProducer};
  for (const auto& raw : frames.records) {
    json f = parse_record(raw, "Frame");
    auto index = field<int>(f, "frame_index", "Frame");
    for (const auto& o : field<json>(f, "objects", "Frame")) {
      if (field<std::string>(o, "label", "Frame") != "person") continue;
      json box{{"frame_index", index},
               {"object_id", field<int>(o, "id", "Frame")},
               {"x", field<int>(o, "x", "Frame")},
               {"y", field<int>(o, "y", "Frame")}};
      if (v2) box["model"] = "v2";
      out.records.push_back(box.dump());
    }
  }
  return out;
}

Payload track(const Payload& bboxes) {
  require_type(bboxes, "Pedestrian-BBox");
  std::map<int, std::vector<json>> by_object;
  for (const auto& raw : bboxes.records) {
    json b = parse_record(raw, "Pedestrian-BBox");
    by_object[field<int>(b, "object_id", "Pedestrian-BBox")].push_back(
        {{"frame_index", field<int>(b, "frame_index", "Pedestrian-BBox")},
         {"x", field<int>(b, "x", "Pedestrian-BBox")},
         {"y", field<int>(b, "y", "Pedestrian-BBox")}});
  }
  Payload out{"Pedestrian-Track", {}, flow::kSourceProducer};
  for (auto& [id, dets] : by_object) {
    std::stable_sort(dets.begin(), dets.end(), [](const json& a, const json& b) {
      return a["frame_index"].get<int>() < b["frame_index"].get<int>();
    });
    out.records.push_back(json{{"detections", dets}, {"object_id", id}}.dump());
  }
  return out;
}

std::string attributes_of(int object_id) {
  static constexpr std::array<std::string_view, 3> kBags{"backpack", "handbag", "nobag"};
  static constexpr std::array<std::string_view, 5> kColours{"red", "blue", "green", "black", "white"};
  std::uint64_t h = splitmix64(static_cast<std::uint64_t>(static_cast<std::int64_t>(object_id)));
  std::string out = (h & 1u) ? "female" : "male";
  out += "|";
  out += kBags[(h >> 8) % kBags.size()];
  out += "|";
  out += kColours[(h >> 16) % kColours.size()];
  out += ((h >> 24) & 1u) ? "|hat" : "|nohat";
  return out;
}

Payload recognize_attributes(const Payload& tracks) {
  require_type(tracks, "Pedestrian-Track");
  Payload out{"Pedestrian-Attribute", {}, flow::kSourceProducer};
  for (const auto& raw : tracks.records) {
    int id = field<int>(parse_record(raw, "Pedestrian-Track"), "object_id", "Pedestrian-Track");
    out.records.push_back(json{{"attributes", attributes_of(id)}, {"object_id", id}}.dump());
  }
  return out;
}

Payload rank_reid(const Payload& attributes, std::string_view target) {
  require_type(attributes, "Pedestrian-Attribute");
  auto wanted = split_attributes(target);
  if (wanted.empty()) throw Error(Errc::BadParam, "target '" + std::string(target) + "' is not an attribute vector");

  struct Candidate {
    int object_id;
    int score;
    std::string attributes;
  };
  std::vector<Candidate> candidates;
  for (const auto& raw : attributes.records) {
    json a = parse_record(raw, "Pedestrian-Attribute");
    Candidate c{field<int>(a, "object_id", "Pedestrian-Attribute"), 0,
                field<std::string>(a, "attributes", "Pedestrian-Attribute")};
    for (const auto& attr : split_attributes(c.attributes)) c.score += wanted.contains(attr) ? 1 : 0;
    candidates.push_back(std::move(c));
  }
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return a.score != b.score ? a.score > b.score : a.object_id < b.object_id;
  });
  Payload out{"ReID-Rank", {}, flow::kSourceProducer};
  int rank = 1;
  for (const auto& c : candidates) {
    out.records.push_back(
        json{{"attributes", c.attributes}, {"object_id", c.object_id}, {"rank", rank++}, {"score", c.score}}.dump());
  }
  return out;
}

Payload annotate(const Payload& frames, const Payload& bboxes) {
  require_type(frames, "Frame");
  require_type(bboxes, "Pedestrian-BBox");
  std::map<int, int> persons;
  for (const auto& raw : bboxes.records) {
    ++persons[field<int>(parse_record(raw, "Pedestrian-BBox"), "frame_index", "Pedestrian-BBox")];
  }
  Payload out{"Annotated-Frame", {}, flow::kSourceProducer};
  for (const auto& raw : frames.records) {
    json f = parse_record(raw, "Frame");
    int index = field<int>(f, "frame_index", "Frame");
    out.records.push_back(json{{"frame_index", index},
                               {"objects", field<json>(f, "objects", "Frame").size()},
                               {"persons", persons[index]}}
                              .dump());
  }
  return out;
}

void ProcessorRegistry::add(std::shared_ptr<Processor> processor) {
  const auto& id = processor->contract().processor_id;
  require_token(id, "processor id");
  if (processors_.contains(id)) throw Error(Errc::BadName, "processor '" + id + "' is already registered");
  processors_.emplace(id, std::move(processor));
}

std::shared_ptr<Processor> ProcessorRegistry::get(const std::string& processor_id) const {
  auto it = processors_.find(processor_id);
  if (it == processors_.end()) throw Error(Errc::NotFound, "no processor '" + processor_id + "'");
  return it->second;
}

std::vector<ProcessorContract> ProcessorRegistry::contracts() const {
  std::vector<ProcessorContract> out;
  for (const auto& [id, p] : processors_) out.push_back(p->contract());
  return out;
}

void check_outputs(const ProcessorContract& contract, const std::vector<Payload>& outputs) {
  for (const auto& p : outputs) {
    if (!contract.produces.contains(p.datatype)) {
      throw Error(Errc::TypeMismatch,
                  "processor '" + contract.processor_id + "' emitted undeclared datatype " + p.datatype);
    }
  }
}

ProcessorRegistry ProcessorRegistry::builtin() {
  using Node = flow::FlowNode;
  ProcessorRegistry reg;
  auto add = [&](ProcessorContract c, FunctionProcessor::Fn fn) {
    reg.add(std::make_shared<FunctionProcessor>(std::move(c), std::move(fn)));
  };

  add({"frame-source", {"Trigger"}, {"Frame"}}, [](const Node& node, const Inputs& inputs) {
    merged(inputs, "Trigger");
    auto count = parse_int(node.param("count").value_or("1"), "count");
    auto seed = parse_int(node.param("seed").value_or("0"), "seed");
    if (count < 0 || count > 100000) throw Error(Errc::BadParam, "count must be in [0, 100000]");
    return std::vector<Payload>{frame_source(static_cast<int>(count), static_cast<std::uint64_t>(seed))};
  });
  add({"detector", {"Frame"}, {"Pedestrian-BBox"}}, [](const Node&, const Inputs& inputs) {
    return std::vector<Payload>{detect(merged(inputs, "Frame"))};
  });
  add({"detector-v2", {"Frame"}, {"Pedestrian-BBox"}}, [](const Node&, const Inputs& inputs) {
    return std::vector<Payload>{detect(merged(inputs, "Frame"), true)};
  });
  add({"tracker", {"Pedestrian-BBox"}, {"Pedestrian-Track"}}, [](const Node&, const Inputs& inputs) {
    return std::vector<Payload>{track(merged(inputs, "Pedestrian-BBox"))};
  });
  add({"attr-recognizer", {"Pedestrian-Track"}, {"Pedestrian-Attribute"}}, [](const Node&, const Inputs& inputs) {
    return std::vector<Payload>{recognize_attributes(merged(inputs, "Pedestrian-Track"))};
  });
  add({"reid-ranker", {"Pedestrian-Attribute"}, {"ReID-Rank"}}, [](const Node& node, const Inputs& inputs) {
    auto target = node.param("target");
    if (!target) throw Error(Errc::BadParam, "reid-ranker needs a 'target' param");
    return std::vector<Payload>{rank_reid(merged(inputs, "Pedestrian-Attribute"), *target)};
  });
  add({"frame-annotator", {"Frame", "Pedestrian-BBox"}, {"Annotated-Frame"}}, [](const Node&, const Inputs& inputs) {
    Payload frames{"Frame", {}, flow::kSourceProducer};
    Payload boxes{"Pedestrian-BBox", {}, flow::kSourceProducer};
    for (const auto& [producer, p] : inputs) {
      auto& dst = p.datatype == "Frame" ? frames : boxes;
      if (p.datatype != "Frame" && p.datatype != "Pedestrian-BBox") {
        throw Error(Errc::TypeMismatch, "frame-annotator cannot use " + p.datatype);
      }
      dst.records.insert(dst.records.end(), p.records.begin(), p.records.end());
    }
    return std::vector<Payload>{annotate(frames, boxes)};
  });
  return reg;
}

}  // namespace vpe::proc
