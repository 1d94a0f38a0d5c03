#pragma once

// Processor plugin contract and the built-in toy vision stages.
//
// Record schemas (one canonical JSON object per record, keys sorted):
//   Frame                {"frame_index":i,"objects":[{"id":n,"label":"person","x":0..255,"y":0..255}]}
//   Pedestrian-BBox      {"frame_index":i,"object_id":n,"x":..,"y":..}
//   Pedestrian-Track     {"detections":[{"frame_index":i,"x":..,"y":..}],"object_id":n}
//   Pedestrian-Attribute {"attributes":"male|backpack|red|nohat","object_id":n}
//   ReID-Rank            {"attributes":"..","object_id":n,"rank":1..,"score":k}
//   Annotated-Frame      {"frame_index":i,"objects":n,"persons":k}

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "vpe/flowgraph.hpp"

namespace vpe::proc {

using Inputs = std::map<flow::NodeId, flow::Payload>;

struct ProcessorContract {
  std::string processor_id;
  std::set<std::string> accepts;
  std::set<std::string> produces;
  bool pure = true;
  /// Calls are serialized by the host when set.
  bool single_threaded = false;
};

class Processor {
 public:
  virtual ~Processor() = default;
  virtual const ProcessorContract& contract() const = 0;
  /// Runs one node execution. `inputs` is keyed by producer node id.
  virtual std::vector<flow::Payload> process(const flow::FlowNode& node, const Inputs& inputs) = 0;
};

class ProcessorRegistry {
 public:
  /// Throws Error{BAD_NAME} on an invalid or duplicate processor id.
  void add(std::shared_ptr<Processor> processor);
  /// Throws Error{NOT_FOUND}.
  std::shared_ptr<Processor> get(const std::string& processor_id) const;
  bool contains(const std::string& processor_id) const { return processors_.contains(processor_id); }
  std::vector<ProcessorContract> contracts() const;

  /// frame-source, detector, detector-v2, tracker, attr-recognizer,
  /// reid-ranker, frame-annotator.
  static ProcessorRegistry builtin();

 private:
  std::map<std::string, std::shared_ptr<Processor>> processors_;
};

/// Throws Error{TYPE_MISMATCH} if an output datatype is not declared in `produces`.
void check_outputs(const ProcessorContract& contract, const std::vector<flow::Payload>& outputs);

// The toy stages as plain functions. Each throws Error{TYPE_MISMATCH} when
// handed the wrong datatype and Error{BAD_PARAM} for unusable parameters.

struct SceneObject {
  int id = 0;
  int x = 0;
  int y = 0;
  std::string label;
};

struct SyntheticFrame {
  int frame_index = 0;
  std::vector<SceneObject> objects;
};

std::vector<SyntheticFrame> generate_frames(int count, std::uint64_t seed);
flow::Payload frame_source(int count, std::uint64_t seed);
flow::Payload detect(const flow::Payload& frames, bool v2 = false);
flow::Payload track(const flow::Payload& bboxes);
/// "gender|bag|colour|hat" derived from a hash of the object id.
std::string attributes_of(int object_id);
flow::Payload recognize_attributes(const flow::Payload& tracks);
flow::Payload rank_reid(const flow::Payload& attributes, std::string_view target);
flow::Payload annotate(const flow::Payload& frames, const flow::Payload& bboxes);

}  // namespace vpe::proc
