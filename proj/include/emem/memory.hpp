#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emem/data_model.hpp"
#include "emem/encoder.hpp"
#include "emem/tree.hpp"

namespace emem {

// One admitted training instance: its frozen encoder embedding plus a
// self-contained copy of the raw states and interaction graphs, so
// explanation traces survive dataset relocation.
struct MemoryPrototype {
  std::vector<double> feature;
  std::string instance_id;
  Instance raw;
  std::vector<InteractionGraph> graphs;
};

struct LeafMemoryBank {
  int leaf_id = 0;
  std::vector<MemoryPrototype> prototypes;
  double eta = 0.0;
  std::vector<std::uint64_t> usage_counts;  // one per prototype
};

struct MemoryBankSet {
  std::map<int, LeafMemoryBank> banks;

  std::size_t total_size() const;
};

// Admission rule of the leaf filter, exposed on raw feature streams: the
// first element is always admitted; a later element is admitted iff its
// maximum cosine similarity against the admitted set is <= eta. Returns
// admitted indices in stream order.
std::vector<std::size_t> lnmf_admit(const std::vector<std::vector<double>>& features, double eta);

// Routes training instances to their ground-truth leaves in dataset order
// and filters each leaf's stream. Every leaf must end up with at least one
// prototype.
MemoryBankSet implant(const Dataset& train, const EncoderParams& encoder, const Tree& tree,
                      double eta, const EdgePolicy& policy);

struct BankStats {
  int leaf_id = 0;
  std::string label;
  std::size_t k = 0;
  std::optional<double> mean_pairwise_cosine;  // empty for single-prototype banks
};

std::vector<BankStats> bank_stats(const MemoryBankSet& banks, const Tree& tree);

// Entropy (nats) of the prototype utilization frequencies of one bank.
double utilization_entropy(const LeafMemoryBank& bank);

}  // namespace emem
