#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace emem {

enum class AgentClass : int {
  kCar = 0,
  kTruck,
  kBus,
  kVan,
  kMotorcycle,
  kPedestrian,
  kCyclist,
  kOther,
};

constexpr int kNumAgentClasses = 8;

std::string agent_class_name(AgentClass c);
std::optional<AgentClass> agent_class_from_name(const std::string& name);

// Wraps an angle into [-pi, pi).
double wrap_angle(double radians);

// One road agent at one frame: id, class, 3D center point (meters) and
// heading (radians in [-pi, pi)).
struct AgentState {
  std::int64_t uid = 0;
  AgentClass cls = AgentClass::kCar;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double orientation = 0.0;

  bool operator==(const AgentState&) const = default;
};

struct Frame {
  std::int64_t t = 0;
  std::vector<AgentState> agents;
  std::int64_t target_uid = 0;

  const AgentState* find(std::int64_t uid) const;
  bool operator==(const Frame&) const = default;
};

// Undirected scene graph for one frame. Edges are stored once, lower uid
// first, sorted.
struct InteractionGraph {
  std::vector<AgentState> vertices;
  std::vector<std::pair<std::int64_t, std::int64_t>> edges;
  std::int64_t target_uid = 0;

  bool operator==(const InteractionGraph&) const = default;
};

// A T-frame observation of one target vehicle plus the behavior label that
// holds ttb_frames after the last observed frame.
struct Instance {
  std::string instance_id;
  std::vector<Frame> frames;
  std::string label;
  std::int64_t ttb_frames = 1;
  double frame_rate_hz = 10.0;

  std::size_t t_len() const { return frames.size(); }
  bool operator==(const Instance&) const = default;
};

struct BehaviorTaxonomy {
  // (label, text description), ordered; the order fixes class indices.
  std::vector<std::pair<std::string, std::string>> labels;

  std::size_t size() const { return labels.size(); }
  std::optional<std::size_t> index_of(const std::string& label) const;
  bool operator==(const BehaviorTaxonomy&) const = default;
};

struct Dataset {
  std::vector<Instance> instances;
  BehaviorTaxonomy taxonomy;

  std::size_t size() const { return instances.size(); }
  bool operator==(const Dataset&) const = default;
};

struct EdgePolicy {
  enum class Kind { kComplete, kRadius };
  Kind kind = Kind::kComplete;
  double radius_meters = 30.0;

  static EdgePolicy complete() { return {Kind::kComplete, 0.0}; }
  static EdgePolicy radius(double r) { return {Kind::kRadius, r}; }
};

struct SyntheticConfig {
  std::int64_t t_frames = 10;
  std::int64_t ttb_frames = 10;
  double frame_rate_hz = 10.0;
  std::int64_t per_class_count = 100;
  double sigma_pos = 0.05;       // additive x/y noise, meters
  std::int64_t neighbors_min = 1;
  std::int64_t neighbors_max = 4;
};

// The generator's eight kinematically separable behaviors, in index order.
const BehaviorTaxonomy& synthetic_taxonomy();

void validate_instance(const Instance& instance);
void validate_dataset(const Dataset& dataset);

// JSONL, one instance per line. frame_rate_hz is the expected rate; a line
// declaring a different rate is rejected. require_uniform_t additionally
// rejects files whose instances disagree on T.
Dataset load_dataset(const std::string& path, double frame_rate_hz,
                     bool require_uniform_t = false);
Dataset load_dataset(const std::string& path, double frame_rate_hz,
                     const BehaviorTaxonomy& taxonomy,
                     bool require_uniform_t = false);
void save_dataset(const Dataset& dataset, const std::string& path);

BehaviorTaxonomy load_taxonomy(const std::string& path);
void save_taxonomy(const BehaviorTaxonomy& taxonomy, const std::string& path);

std::vector<InteractionGraph> build_interaction_graphs(const Instance& instance,
                                                       const EdgePolicy& policy);

Dataset generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

// Stratified split; deterministic per seed; train gets round(fraction * n)
// of each class.
std::pair<Dataset, Dataset> split(const Dataset& dataset, double train_fraction,
                                  std::uint64_t seed);

}  // namespace emem
