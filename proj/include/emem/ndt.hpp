#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "emem/data_model.hpp"
#include "emem/encoder.hpp"
#include "emem/memory.hpp"
#include "emem/tree.hpp"

namespace emem {

// Two dense layers with tanh between them, identity at the output; projects
// instance embeddings and stored prototypes into a shared matching space.
struct LeafTransform {
  int in_dim = 32;
  int hidden = 64;
  int out = 32;
  std::vector<double> w;  // [w1 hidden*in | b1 hidden | w2 out*hidden | b2 out]

  std::size_t size() const {
    return static_cast<std::size_t>(hidden) * in_dim + hidden +
           static_cast<std::size_t>(out) * hidden + out;
  }
  std::size_t w1_off() const { return 0; }
  std::size_t b1_off() const { return static_cast<std::size_t>(hidden) * in_dim; }
  std::size_t w2_off() const { return b1_off() + hidden; }
  std::size_t b2_off() const { return w2_off() + static_cast<std::size_t>(out) * hidden; }

  std::vector<double> apply(const std::vector<double>& x) const;
};

enum class Aggregation { kMax, kMean };

std::string aggregation_name(Aggregation a);
std::optional<Aggregation> aggregation_from_name(const std::string& name);

struct EMemNdtModel {
  Tree tree;
  MemoryBankSet banks;
  // Per-leaf transforms; when shared_h is set, the single entry under key
  // kSharedKey serves every leaf.
  std::map<int, LeafTransform> transforms;
  double rho = 30.0;
  Aggregation aggregation = Aggregation::kMax;
  bool shared_h = false;
  std::string encoder_hash;

  static constexpr int kSharedKey = -1;

  // Transformed bank features, recomputed whenever transforms change.
  struct TransformedBank {
    std::vector<std::vector<double>> v;   // H(e_k)
    std::vector<std::vector<double>> a1;  // hidden tanh activations per prototype
  };
  std::map<int, TransformedBank> cache;

  const LeafTransform& transform_for(int leaf_id) const;
  LeafTransform& transform_for(int leaf_id);
  void refresh_cache();
};

struct NodeScores {
  std::map<int, double> gamma;  // every tree node
};

struct LeafDistribution {
  std::map<int, double> s;      // leaf probabilities, sum to 1
  std::map<int, double> log_s;  // computed in log space
};

struct NdtTrainConfig {
  int epochs = 5;
  double lr = 5e-5;
  double weight_decay = 1e-6;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

struct ExplanationTrace {
  std::string instance_id;
  std::string predicted_label;
  int predicted_leaf = 0;

  struct PathNode {
    int node_id = 0;
    std::string name;                                // annotation or leaf label
    std::vector<std::pair<int, double>> child_probs;  // softmax at this node
  };
  std::vector<PathNode> path;  // root first, predicted leaf last

  struct PrototypeRef {
    int leaf_id = 0;
    std::size_t index = 0;
    std::string instance_id;
    double gamma = 0.0;
  };
  PrototypeRef prototype;
  LeafDistribution distribution;
};

EMemNdtModel init_model(const Tree& tree, MemoryBankSet banks, int in_dim, int hidden, int out,
                        double rho, Aggregation aggregation, bool shared_h, std::uint64_t seed,
                        const std::string& encoder_hash);

// Amplified cosine between H(g) and the leaf's transformed prototypes,
// reduced by the configured aggregation; also returns the best prototype.
std::pair<double, std::size_t> leaf_similarity(const std::vector<double>& g, int leaf_id,
                                               const EMemNdtModel& model);

// Bottom-up mean propagation from given leaf scores to every node.
NodeScores propagate_scores(const Tree& tree, const std::map<int, double>& leaf_gamma);

NodeScores mpm(const std::vector<double>& g, const EMemNdtModel& model);

// Top-down per-node softmax with root-to-leaf probability products.
LeafDistribution lla(const NodeScores& scores, const EMemNdtModel& model);

struct PredictResult {
  std::string label;
  int leaf_id = 0;
  std::size_t best_prototype = 0;  // within the predicted leaf's bank
  double best_gamma = 0.0;
  LeafDistribution distribution;
};

PredictResult predict(const std::vector<double>& g, const EMemNdtModel& model);

void record_usage(EMemNdtModel& model, int leaf_id, std::size_t prototype_index);

ExplanationTrace explain(const Instance& instance, const EncoderParams& encoder,
                         EMemNdtModel& model, const EdgePolicy& policy, bool track_usage = true);

// Mean negative log-likelihood of the ground-truth leaves.
double ndt_loss(const std::vector<std::vector<double>>& gs, const std::vector<int>& leaf_ids,
                const EMemNdtModel& model);

// Optimizes the leaf transforms only; the encoder stays frozen.
void train_ndt(EMemNdtModel& model, const Dataset& train, const EncoderParams& encoder,
               const NdtTrainConfig& config, const EdgePolicy& policy);

GradCheckResult ndt_grad_check(const EMemNdtModel& model,
                               const std::vector<std::vector<double>>& gs,
                               const std::vector<int>& leaf_ids, double epsilon,
                               std::size_t n_samples = 120, std::uint64_t seed = 0);

void save_model(const EMemNdtModel& model, const std::string& path);
EMemNdtModel load_model(const std::string& path);

}  // namespace emem
