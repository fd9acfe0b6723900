#include "emem/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "emem/error.hpp"
#include "emem/rng.hpp"
#include "emem/serial.hpp"
#include "json.hpp"

namespace emem {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

const char* kClassNames[kNumAgentClasses] = {
    "car", "truck", "bus", "van", "motorcycle", "pedestrian", "cyclist", "other"};

// ---- json field helpers with contextual diagnostics ----

[[noreturn]] void fail(const std::string& ctx, const std::string& what) {
  throw data_error(ctx + ": " + what);
}

const json& require_field(const json& j, const char* key, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end()) fail(ctx, std::string("missing field '") + key + "'");
  return *it;
}

double require_num(const json& j, const char* key, const std::string& ctx) {
  const json& f = require_field(j, key, ctx);
  if (!f.is_number()) fail(ctx, std::string("field '") + key + "' must be a number");
  return f.get<double>();
}

std::int64_t require_int(const json& j, const char* key, const std::string& ctx) {
  const json& f = require_field(j, key, ctx);
  if (!f.is_number_integer()) fail(ctx, std::string("field '") + key + "' must be an integer");
  return f.get<std::int64_t>();
}

std::string require_str(const json& j, const char* key, const std::string& ctx) {
  const json& f = require_field(j, key, ctx);
  if (!f.is_string()) fail(ctx, std::string("field '") + key + "' must be a string");
  return f.get<std::string>();
}

const json& require_arr(const json& j, const char* key, const std::string& ctx) {
  const json& f = require_field(j, key, ctx);
  if (!f.is_array()) fail(ctx, std::string("field '") + key + "' must be an array");
  return f;
}

AgentState agent_from_json(const json& j, const std::string& ctx) {
  AgentState a;
  a.uid = require_int(j, "uid", ctx);
  const std::string cls = require_str(j, "class", ctx);
  const auto parsed = agent_class_from_name(cls);
  if (!parsed) fail(ctx, "unknown agent class '" + cls + "'");
  a.cls = *parsed;
  a.x = require_num(j, "x", ctx);
  a.y = require_num(j, "y", ctx);
  a.z = require_num(j, "z", ctx);
  a.orientation = require_num(j, "orientation", ctx);
  return a;
}

json agent_to_json(const AgentState& a) {
  return json{{"uid", a.uid},       {"class", agent_class_name(a.cls)},
              {"x", a.x},           {"y", a.y},
              {"z", a.z},           {"orientation", a.orientation}};
}

}  // namespace

Instance instance_from_json(const json& j, const std::string& where) {
  Instance inst;
  inst.instance_id = require_str(j, "instance_id", where);
  const std::string ctx = where + " (instance '" + inst.instance_id + "')";
  inst.frame_rate_hz = require_num(j, "frame_rate_hz", ctx);
  inst.ttb_frames = require_int(j, "ttb_frames", ctx);
  inst.label = require_str(j, "label", ctx);
  for (const json& jf : require_arr(j, "frames", ctx)) {
    Frame f;
    f.t = require_int(jf, "t", ctx);
    f.target_uid = require_int(jf, "target_uid", ctx);
    const json& agents = require_arr(jf, "agents", ctx);
    const std::string fctx = ctx + " frame " + std::to_string(f.t);
    for (const json& ja : agents) f.agents.push_back(agent_from_json(ja, fctx));
    inst.frames.push_back(std::move(f));
  }
  return inst;
}

json instance_to_json(const Instance& inst) {
  json frames = json::array();
  for (const Frame& f : inst.frames) {
    json agents = json::array();
    for (const AgentState& a : f.agents) agents.push_back(agent_to_json(a));
    frames.push_back(json{{"t", f.t}, {"target_uid", f.target_uid}, {"agents", std::move(agents)}});
  }
  return json{{"instance_id", inst.instance_id},
              {"frame_rate_hz", inst.frame_rate_hz},
              {"ttb_frames", inst.ttb_frames},
              {"label", inst.label},
              {"frames", std::move(frames)}};
}

double wrap_angle(double a) {
  return a - 2.0 * kPi * std::floor((a + kPi) / (2.0 * kPi));
}

std::string agent_class_name(AgentClass c) { return kClassNames[static_cast<int>(c)]; }

std::optional<AgentClass> agent_class_from_name(const std::string& name) {
  for (int i = 0; i < kNumAgentClasses; ++i) {
    if (name == kClassNames[i]) return static_cast<AgentClass>(i);
  }
  return std::nullopt;
}

const AgentState* Frame::find(std::int64_t uid) const {
  for (const AgentState& a : agents) {
    if (a.uid == uid) return &a;
  }
  return nullptr;
}

std::optional<std::size_t> BehaviorTaxonomy::index_of(const std::string& label) const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].first == label) return i;
  }
  return std::nullopt;
}

void validate_instance(const Instance& inst) {
  const std::string ctx = "instance '" + inst.instance_id + "'";
  if (inst.instance_id.empty()) throw data_error("instance with empty instance_id");
  if (inst.frames.empty()) fail(ctx, "no frames (T must be >= 1)");
  if (inst.ttb_frames < 1) fail(ctx, "ttb_frames must be >= 1");
  if (!(inst.frame_rate_hz > 0.0)) fail(ctx, "frame_rate_hz must be positive");
  const std::int64_t target = inst.frames.front().target_uid;
  for (std::size_t i = 0; i < inst.frames.size(); ++i) {
    const Frame& f = inst.frames[i];
    const std::string fctx = ctx + " frame index " + std::to_string(i);
    if (f.agents.empty()) fail(fctx, "frame has no agents");
    if (f.target_uid != target) fail(fctx, "target_uid differs across frames");
    if (i > 0 && f.t != inst.frames[i - 1].t + 1) fail(fctx, "frame indices must be consecutive");
    std::unordered_set<std::int64_t> uids;
    bool target_present = false;
    for (const AgentState& a : f.agents) {
      if (!uids.insert(a.uid).second) {
        fail(fctx, "duplicate agent uid " + std::to_string(a.uid));
      }
      if (a.uid == f.target_uid) target_present = true;
      if (!std::isfinite(a.x) || !std::isfinite(a.y) || !std::isfinite(a.z)) {
        fail(fctx, "non-finite coordinates for agent " + std::to_string(a.uid));
      }
      if (!std::isfinite(a.orientation) || a.orientation < -kPi || a.orientation >= kPi) {
        fail(fctx, "orientation out of [-pi, pi) for agent " + std::to_string(a.uid));
      }
    }
    if (!target_present) {
      fail(ctx, "target_uid " + std::to_string(f.target_uid) + " absent from frame index " +
                    std::to_string(i));
    }
  }
}

void validate_dataset(const Dataset& ds) {
  std::unordered_set<std::string> seen;
  for (const auto& [label, desc] : ds.taxonomy.labels) {
    if (label.empty()) throw data_error("taxonomy: empty label");
    if (desc.empty()) throw data_error("taxonomy: empty description for label '" + label + "'");
    if (!seen.insert(label).second) throw data_error("taxonomy: duplicate label '" + label + "'");
  }
  if (ds.taxonomy.size() < 2) throw data_error("taxonomy must have at least 2 labels");
  for (const Instance& inst : ds.instances) {
    validate_instance(inst);
    if (!ds.taxonomy.index_of(inst.label)) {
      throw data_error("instance '" + inst.instance_id + "' has label '" + inst.label +
                       "' not present in the taxonomy");
    }
  }
}

Dataset load_dataset(const std::string& path, double frame_rate_hz, bool require_uniform_t) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open dataset file: " + path);

  Dataset ds;
  std::vector<std::string> label_order;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw data_error(where + ": parse error: " + e.what());
    }
    Instance inst = instance_from_json(j, where);
    try {
      validate_instance(inst);
    } catch (const Error& e) {
      throw data_error(where + ": " + e.what());
    }
    if (std::abs(inst.frame_rate_hz - frame_rate_hz) > 1e-9) {
      throw data_error(where + ": instance '" + inst.instance_id + "' declares frame_rate_hz " +
                       std::to_string(inst.frame_rate_hz) + ", expected " +
                       std::to_string(frame_rate_hz));
    }
    if (std::find(label_order.begin(), label_order.end(), inst.label) == label_order.end()) {
      label_order.push_back(inst.label);
    }
    ds.instances.push_back(std::move(inst));
  }
  for (const std::string& l : label_order) ds.taxonomy.labels.emplace_back(l, l);
  if (require_uniform_t && !ds.instances.empty()) {
    const std::size_t t0 = ds.instances.front().t_len();
    for (const Instance& inst : ds.instances) {
      if (inst.t_len() != t0) {
        throw data_error("dataset " + path + ": instance '" + inst.instance_id + "' has T=" +
                         std::to_string(inst.t_len()) + " but the run requires uniform T=" +
                         std::to_string(t0));
      }
    }
  }
  return ds;
}

Dataset load_dataset(const std::string& path, double frame_rate_hz,
                     const BehaviorTaxonomy& taxonomy, bool require_uniform_t) {
  Dataset ds = load_dataset(path, frame_rate_hz, require_uniform_t);
  ds.taxonomy = taxonomy;
  validate_dataset(ds);
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open output file: " + path);
  for (const Instance& inst : ds.instances) {
    out << instance_to_json(inst).dump() << '\n';
  }
  if (!out) throw data_error("write failure: " + path);
}

BehaviorTaxonomy load_taxonomy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open taxonomy file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw data_error(path + ": parse error: " + e.what());
  }
  if (!j.is_array()) throw data_error(path + ": taxonomy must be a JSON array");
  BehaviorTaxonomy tax;
  for (const json& e : j) {
    tax.labels.emplace_back(require_str(e, "label", path), require_str(e, "description", path));
  }
  Dataset probe;
  probe.taxonomy = tax;
  validate_dataset(probe);
  return tax;
}

void save_taxonomy(const BehaviorTaxonomy& tax, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open output file: " + path);
  json arr = json::array();
  for (const auto& [label, desc] : tax.labels) {
    arr.push_back(json{{"label", label}, {"description", desc}});
  }
  out << arr.dump(2) << '\n';
}

std::vector<InteractionGraph> build_interaction_graphs(const Instance& inst,
                                                       const EdgePolicy& policy) {
  std::vector<InteractionGraph> graphs;
  graphs.reserve(inst.frames.size());
  for (const Frame& f : inst.frames) {
    InteractionGraph g;
    g.vertices = f.agents;
    g.target_uid = f.target_uid;
    for (std::size_t i = 0; i < f.agents.size(); ++i) {
      for (std::size_t k = i + 1; k < f.agents.size(); ++k) {
        const AgentState& a = f.agents[i];
        const AgentState& b = f.agents[k];
        if (policy.kind == EdgePolicy::Kind::kRadius) {
          const double d = std::hypot(a.x - b.x, a.y - b.y, a.z - b.z);
          if (d > policy.radius_meters) continue;
        }
        g.edges.emplace_back(std::min(a.uid, b.uid), std::max(a.uid, b.uid));
      }
    }
    std::sort(g.edges.begin(), g.edges.end());
    graphs.push_back(std::move(g));
  }
  return graphs;
}

// ---- synthetic generator ----

const BehaviorTaxonomy& synthetic_taxonomy() {
  static const BehaviorTaxonomy tax{{
      {"stopping", "the vehicle brakes firmly and comes to a complete stop"},
      {"lane-keeping", "the vehicle keeps its current lane at a steady cruising speed"},
      {"accelerating-straight", "the vehicle speeds up while driving straight ahead"},
      {"decelerating-straight", "the vehicle slows down while driving straight ahead"},
      {"turn-left", "the vehicle steers into a left turn at the junction"},
      {"turn-right", "the vehicle steers into a right turn at the junction"},
      {"lane-change-left", "the vehicle moves over into the adjacent lane on its left"},
      {"lane-change-right", "the vehicle moves over into the adjacent lane on its right"},
  }};
  return tax;
}

namespace {

struct Pose {
  double x, y, heading;
};

// Target trajectory over n frames for one behavior template. Index into the
// synthetic taxonomy picks the template.
std::vector<Pose> target_trajectory(std::size_t class_idx, std::size_t n, double dt, Rng& rng) {
  const double theta0 = rng.uniform(-2.0, 2.0);  // kept away from the +/-pi wrap
  std::vector<Pose> poses(n);
  auto straight = [&](double v0, double accel, double v_floor) {
    double x = 0.0, y = 0.0, v = v0;
    for (std::size_t t = 0; t < n; ++t) {
      poses[t] = {x, y, theta0};
      x += v * dt * std::cos(theta0);
      y += v * dt * std::sin(theta0);
      v = std::max(v_floor, v + accel * dt);
    }
  };
  switch (class_idx) {
    case 0: {  // stopping: brakes hard, stands still well before the prediction instant
      const double v0 = rng.uniform(4.0, 8.0);
      const double t_stop = rng.uniform(0.25, 0.40) * static_cast<double>(n - 1) * dt;
      straight(v0, -v0 / t_stop, 0.0);
      break;
    }
    case 1:  // lane-keeping: steady cruise
      straight(rng.uniform(8.5, 10.5), 0.0, 0.0);
      break;
    case 2:  // accelerating-straight: moderate speed, clearly gaining
      straight(rng.uniform(3.5, 6.0), rng.uniform(2.0, 4.0), 0.0);
      break;
    case 3:  // decelerating-straight: fast entry, clearly shedding speed, keeps rolling
      straight(rng.uniform(14.0, 17.0), -rng.uniform(2.5, 5.0), 2.0);
      break;
    case 4:
    case 5: {  // turns: constant speed, constant yaw rate
      const double v0 = rng.uniform(5.0, 10.0);
      const double omega = (class_idx == 4 ? 1.0 : -1.0) * rng.uniform(0.25, 0.45);
      double x = 0.0, y = 0.0, th = theta0;
      for (std::size_t t = 0; t < n; ++t) {
        poses[t] = {x, y, th};
        x += v0 * dt * std::cos(th);
        y += v0 * dt * std::sin(th);
        th += omega * dt;
      }
      break;
    }
    case 6:
    case 7: {  // lane changes: smoothstep lateral offset, heading follows velocity
      const double v0 = rng.uniform(8.0, 15.0);
      const double side = class_idx == 6 ? 1.0 : -1.0;
      const double lane_width = 3.5;
      const double cx = std::cos(theta0), sy = std::sin(theta0);
      for (std::size_t t = 0; t < n; ++t) {
        const double u = static_cast<double>(t) / static_cast<double>(n - 1);
        const double s = v0 * static_cast<double>(t) * dt;
        const double l = side * lane_width * (3.0 * u * u - 2.0 * u * u * u);
        poses[t].x = s * cx - l * sy;
        poses[t].y = s * sy + l * cx;
      }
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t a = (t + 1 < n) ? t : t - 1;
        poses[t].heading =
            std::atan2(poses[a + 1].y - poses[a].y, poses[a + 1].x - poses[a].x);
      }
      break;
    }
    default:
      throw usage_error("synthetic: unknown class index");
  }
  return poses;
}

struct Neighbor {
  std::int64_t uid;
  AgentClass cls;
  double x0, y0, speed, heading;
  std::int64_t t_in, t_out;  // visible for t in [t_in, t_out)
};

AgentClass sample_neighbor_class(Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.40) return AgentClass::kCar;
  if (u < 0.50) return AgentClass::kTruck;
  if (u < 0.55) return AgentClass::kBus;
  if (u < 0.60) return AgentClass::kVan;
  if (u < 0.65) return AgentClass::kMotorcycle;
  if (u < 0.85) return AgentClass::kPedestrian;
  if (u < 0.95) return AgentClass::kCyclist;
  return AgentClass::kOther;
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.per_class_count <= 0) throw usage_error("synthetic: per_class_count must be positive");
  if (cfg.t_frames <= 0) throw usage_error("synthetic: t_frames must be positive");
  if (cfg.ttb_frames <= 0) throw usage_error("synthetic: ttb_frames must be positive");
  if (!(cfg.frame_rate_hz > 0.0)) throw usage_error("synthetic: frame_rate_hz must be positive");
  if (cfg.sigma_pos < 0.0) throw usage_error("synthetic: sigma_pos must be nonnegative");
  if (cfg.neighbors_min < 0 || cfg.neighbors_max < cfg.neighbors_min) {
    throw usage_error("synthetic: invalid neighbor count range");
  }

  Rng rng(seed);
  const auto& tax = synthetic_taxonomy();
  const std::size_t t_obs = static_cast<std::size_t>(cfg.t_frames);
  const std::size_t n_total = t_obs + static_cast<std::size_t>(cfg.ttb_frames);
  const double dt = 1.0 / cfg.frame_rate_hz;

  Dataset ds;
  ds.taxonomy = tax;
  for (std::size_t ci = 0; ci < tax.size(); ++ci) {
    for (std::int64_t k = 0; k < cfg.per_class_count; ++k) {
      Instance inst;
      {
        char idbuf[96];
        std::snprintf(idbuf, sizeof(idbuf), "%s-%04lld", tax.labels[ci].first.c_str(),
                      static_cast<long long>(k));
        inst.instance_id = idbuf;
      }
      inst.label = tax.labels[ci].first;
      inst.ttb_frames = cfg.ttb_frames;
      inst.frame_rate_hz = cfg.frame_rate_hz;

      const std::vector<Pose> target = target_trajectory(ci, n_total, dt, rng);

      const auto n_neighbors = rng.uniform_int(cfg.neighbors_min, cfg.neighbors_max);
      std::vector<Neighbor> neighbors;
      for (std::int64_t j = 0; j < n_neighbors; ++j) {
        Neighbor nb;
        nb.uid = 1 + j;
        nb.cls = sample_neighbor_class(rng);
        const double dist = rng.uniform(5.0, 25.0);
        const double ang = rng.uniform(0.0, 2.0 * kPi);
        nb.x0 = dist * std::cos(ang);
        nb.y0 = dist * std::sin(ang);
        nb.heading = rng.uniform(-kPi, kPi);
        switch (nb.cls) {
          case AgentClass::kPedestrian: nb.speed = rng.uniform(0.5, 2.0); break;
          case AgentClass::kCyclist: nb.speed = rng.uniform(2.0, 6.0); break;
          default: nb.speed = rng.uniform(0.0, 12.0); break;
        }
        if (rng.uniform() < 0.7 || t_obs < 4) {
          nb.t_in = 0;
          nb.t_out = static_cast<std::int64_t>(t_obs);
        } else {
          nb.t_in = rng.uniform_int(0, static_cast<std::int64_t>(t_obs) - 3);
          nb.t_out = nb.t_in + rng.uniform_int(3, static_cast<std::int64_t>(t_obs) - nb.t_in);
        }
        neighbors.push_back(nb);
      }

      for (std::size_t t = 0; t < t_obs; ++t) {
        Frame f;
        f.t = static_cast<std::int64_t>(t);
        f.target_uid = 0;
        AgentState tv;
        tv.uid = 0;
        tv.cls = AgentClass::kCar;
        tv.x = target[t].x + rng.normal(0.0, cfg.sigma_pos);
        tv.y = target[t].y + rng.normal(0.0, cfg.sigma_pos);
        tv.z = 0.0;
        tv.orientation = wrap_angle(target[t].heading);
        f.agents.push_back(tv);
        for (const Neighbor& nb : neighbors) {
          if (static_cast<std::int64_t>(t) < nb.t_in || static_cast<std::int64_t>(t) >= nb.t_out) {
            continue;
          }
          AgentState a;
          a.uid = nb.uid;
          a.cls = nb.cls;
          const double tt = static_cast<double>(t) * dt;
          a.x = nb.x0 + nb.speed * tt * std::cos(nb.heading) + rng.normal(0.0, cfg.sigma_pos);
          a.y = nb.y0 + nb.speed * tt * std::sin(nb.heading) + rng.normal(0.0, cfg.sigma_pos);
          a.z = 0.0;
          a.orientation = wrap_angle(nb.heading);
          f.agents.push_back(a);
        }
        inst.frames.push_back(std::move(f));
      }
      ds.instances.push_back(std::move(inst));
    }
  }
  validate_dataset(ds);
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw usage_error("split: train_fraction must be in (0, 1)");
  }
  if (ds.size() < 2) throw data_error("split: dataset must contain at least 2 instances");

  std::vector<bool> in_train(ds.size(), false);
  Rng rng(seed);
  for (const auto& [label, desc] : ds.taxonomy.labels) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.instances[i].label == label) idx.push_back(i);
    }
    if (idx.empty()) continue;
    rng.shuffle(idx);
    const auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < n_train && i < idx.size(); ++i) in_train[idx[i]] = true;
  }

  Dataset train, test;
  train.taxonomy = ds.taxonomy;
  test.taxonomy = ds.taxonomy;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    (in_train[i] ? train : test).instances.push_back(ds.instances[i]);
  }
  return {std::move(train), std::move(test)};
}

}  // namespace emem
