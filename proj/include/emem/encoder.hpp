#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emem/data_model.hpp"

namespace emem {

struct EncoderConfig {
  int d_model = 32;
  int n_heads = 4;
  int n_layers = 2;
  int d_graph = 32;
  int t_len = 0;      // observation length T; filled from the data when 0
  int n_classes = 0;  // M; filled from the taxonomy when 0

  static constexpr int kClassEmbedDim = 4;
  // class embedding + [uid, x, y, z, orientation]
  static constexpr int kTokenDim = kClassEmbedDim + 5;

  int d_ff() const { return 2 * d_model; }
  int gru_dim() const { return d_graph * kTokenDim; }
  void validate() const;
};

// All trainable weights in one flat row-major buffer; see ParamLayout in the
// implementation for the slice map. Serialized as named arrays ("encoder/v1").
struct EncoderParams {
  EncoderConfig config;
  std::vector<double> w;
};

// Named view into the flat weight buffer (row-major rows x cols at offset).
struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 1;
  std::size_t size() const { return rows * cols; }
};

std::vector<ParamSlice> encoder_param_slices(const EncoderConfig& config);

struct InstanceEmbedding {
  std::vector<double> g;        // fused embedding (width d_model)
  std::vector<double> f_state;  // state-path embedding (width d_model)
  std::vector<double> f_graph;  // graph-path embedding (width d_graph)
};

struct ForwardResult {
  InstanceEmbedding embedding;
  std::vector<double> probs;  // M class probabilities, sums to 1
};

struct BaseTrainConfig {
  int epochs = 80;
  double lr_state = 5e-4;   // state transformer, fusion and classifier
  double lr_graph = 5e-3;   // graph path
  double weight_decay = 1e-5;
  int batch_size = 64;
  std::uint64_t seed = 0;
};

EncoderParams init_encoder_params(const EncoderConfig& config, std::uint64_t seed);

// Per-frame target rows [uid/100, class_code, x', y', z', heading'] in the
// target's first-frame pose frame: positions are centered on the first
// observed position, rotated by minus the first heading and scaled by 0.1;
// headings are relative to the first heading, wrapped to [-pi, pi).
std::vector<double> state_features(const Instance& instance);

// Sequence encoder over the T x 6 state array (mean-pooled tokens).
std::vector<double> encode_states(const std::vector<double>& states,
                                  const EncoderParams& params);

// Per-frame graph convolution with recurrently evolved weights, per-time and
// temporal attention, mean-pooled.
std::vector<double> encode_graphs(const std::vector<InteractionGraph>& graphs,
                                  const EncoderParams& params);

ForwardResult fuse_and_classify(const std::vector<double>& f_state,
                                const std::vector<double>& f_graph,
                                const EncoderParams& params);

ForwardResult encode_instance(const Instance& instance,
                              const std::vector<InteractionGraph>& graphs,
                              const EncoderParams& params);

// Encodes every instance, sharing the evolved graph weights across the set.
// Inference on frozen params is pure, so chunks may run on worker threads;
// results land in per-instance slots and do not depend on the thread count.
std::vector<ForwardResult> encode_instances(const std::vector<Instance>& instances,
                                            const EncoderParams& params, const EdgePolicy& policy,
                                            int threads = 1);

std::vector<ForwardResult> encode_dataset(const Dataset& dataset, const EncoderParams& params,
                                          const EdgePolicy& policy);

double cross_entropy(const std::vector<double>& probs, std::size_t label_index);

EncoderParams train_base(const Dataset& train, const BaseTrainConfig& train_config,
                         EncoderConfig config, const EdgePolicy& policy);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  std::size_t n_checked = 0;
};

// Cross-entropy of one instance against its label.
double encoder_loss(const EncoderParams& params, const Instance& instance,
                    const BehaviorTaxonomy& taxonomy, const EdgePolicy& policy);

// Same loss plus the analytic gradient over the flat parameter buffer.
std::pair<double, std::vector<double>> encoder_loss_and_grad(const EncoderParams& params,
                                                             const Instance& instance,
                                                             const BehaviorTaxonomy& taxonomy,
                                                             const EdgePolicy& policy);

// Central finite differences of the cross-entropy loss against the analytic
// gradient on sampled parameter coordinates.
GradCheckResult grad_check(const EncoderParams& params, const Instance& instance,
                           const BehaviorTaxonomy& taxonomy, const EdgePolicy& policy,
                           double epsilon, std::size_t n_samples = 120,
                           std::uint64_t seed = 0);

void save_encoder(const EncoderParams& params, const std::string& path);
EncoderParams load_encoder(const std::string& path);

// Hash of a serialized encoder file, stored in model files to pin the
// encoder a tree head was trained against.
std::string file_content_hash(const std::string& path);

}  // namespace emem
