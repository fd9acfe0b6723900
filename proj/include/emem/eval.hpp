#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "emem/data_model.hpp"
#include "emem/encoder.hpp"
#include "emem/ndt.hpp"
#include "json.hpp"

namespace emem {

struct ConfusionMatrix {
  std::vector<std::string> labels;   // taxonomy order
  std::vector<std::uint64_t> counts;  // row = ground truth, col = predicted

  std::size_t m() const { return labels.size(); }
  std::uint64_t& cell(std::size_t truth, std::size_t pred) { return counts[truth * m() + pred]; }
  std::uint64_t cell(std::size_t truth, std::size_t pred) const { return counts[truth * m() + pred]; }
  std::uint64_t total() const;
  std::string to_csv() const;
};

struct ClassMetrics {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  // micro precision = recall = F1 = accuracy for single-label classification
  double micro_precision = 0.0, micro_recall = 0.0, micro_f1 = 0.0;
  std::vector<std::string> zero_support_labels;  // excluded from macro averages
};

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm);

// Runs the full eMem-NDT path on every test instance. Encoding may be
// chunked over threads; counts merge by summation so the result does not
// depend on the thread count.
std::pair<ConfusionMatrix, MetricsReport> evaluate(EMemNdtModel& model,
                                                   const EncoderParams& encoder,
                                                   const Dataset& test, const EdgePolicy& policy,
                                                   int threads = 1, bool track_usage = true);

// Same metrics for the base encoder's softmax head alone.
std::pair<ConfusionMatrix, MetricsReport> evaluate_base(const EncoderParams& encoder,
                                                        const Dataset& test,
                                                        const EdgePolicy& policy,
                                                        int threads = 1);

MetricsReport few_shot_report(const MetricsReport& report,
                              const std::vector<std::string>& few_shot_labels);

struct NdtBuildConfig {
  int hidden = 64;
  int out = 32;
  double rho = 30.0;
  Aggregation aggregation = Aggregation::kMax;
  bool shared_h = false;
  std::uint64_t seed = 0;
};

struct EtaSweepRow {
  double eta = 0.0;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  std::size_t emb_total = 0;
};

// implant -> train_ndt -> evaluate for each eta, from a fresh seeded head.
std::vector<EtaSweepRow> sweep_eta(const Dataset& train, const Dataset& test,
                                   const EncoderParams& encoder, const Tree& tree,
                                   const std::vector<double>& etas,
                                   const NdtBuildConfig& build, const NdtTrainConfig& train_cfg,
                                   const EdgePolicy& policy);

struct LeafUtilization {
  int leaf_id = 0;
  std::string label;
  std::size_t k = 0;
  double entropy = 0.0;  // nats
  std::vector<std::pair<std::size_t, std::uint64_t>> top_used;  // up to 3 (index, count)
  double zero_usage_fraction = 0.0;
};

std::vector<LeafUtilization> utilization_report(const EMemNdtModel& model);

nlohmann::json report_to_json(const ConfusionMatrix& cm, const MetricsReport& report);
std::string report_to_text(const MetricsReport& report);

}  // namespace emem
