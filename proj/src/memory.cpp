#include "emem/memory.hpp"

#include <cmath>

#include "emem/error.hpp"
#include "emem/kernels.hpp"

namespace emem {

std::size_t MemoryBankSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [id, bank] : banks) n += bank.prototypes.size();
  return n;
}

std::vector<std::size_t> lnmf_admit(const std::vector<std::vector<double>>& features,
                                    double eta) {
  if (eta < -1.0 || eta > 1.0) throw usage_error("lnmf: eta must be in [-1, 1]");
  std::vector<std::size_t> admitted;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& f = features[i];
    if (kernels::norm2(f.data(), f.size()) == 0.0) {
      throw numeric_error("lnmf: zero-norm feature at stream position " + std::to_string(i));
    }
    if (admitted.empty()) {
      admitted.push_back(i);
      continue;
    }
    double v_max = -1.0;
    for (std::size_t k : admitted) {
      v_max = std::max(v_max, kernels::cosine(features[k], f));
    }
    if (v_max <= eta) admitted.push_back(i);
  }
  return admitted;
}

MemoryBankSet implant(const Dataset& train, const EncoderParams& encoder, const Tree& tree,
                      double eta, const EdgePolicy& policy) {
  if (eta < -1.0 || eta > 1.0) throw usage_error("implant: eta must be in [-1, 1]");
  validate_tree(tree);

  MemoryBankSet set;
  for (int leaf = 0; leaf < tree.leaf_count; ++leaf) {
    LeafMemoryBank bank;
    bank.leaf_id = leaf;
    bank.eta = eta;
    set.banks[leaf] = std::move(bank);
  }

  const std::vector<ForwardResult> encoded = encode_dataset(train, encoder, policy);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const Instance& inst = train.instances[i];
    const auto leaf = tree.leaf_for_label(inst.label);
    if (!leaf) {
      throw data_error("implant: label '" + inst.label + "' of instance '" + inst.instance_id +
                       "' has no leaf in the tree");
    }
    const std::vector<double>& g = encoded[i].embedding.g;
    if (kernels::norm2(g.data(), g.size()) == 0.0) {
      throw numeric_error("implant: zero-norm embedding for instance '" + inst.instance_id + "'");
    }
    LeafMemoryBank& bank = set.banks.at(*leaf);
    bool admit = bank.prototypes.empty();
    if (!admit) {
      double v_max = -1.0;
      for (const MemoryPrototype& p : bank.prototypes) {
        v_max = std::max(v_max, kernels::cosine(p.feature, g));
      }
      admit = v_max <= eta;
    }
    if (admit) {
      MemoryPrototype p;
      p.feature = g;
      p.instance_id = inst.instance_id;
      p.raw = inst;
      p.graphs = build_interaction_graphs(inst, policy);
      bank.prototypes.push_back(std::move(p));
      bank.usage_counts.push_back(0);
    }
  }

  std::string missing;
  for (const auto& [leaf, bank] : set.banks) {
    if (bank.prototypes.empty()) {
      if (!missing.empty()) missing += ", ";
      missing += "'" + tree.node(leaf).label + "'";
    }
  }
  if (!missing.empty()) {
    throw data_error("implant: no training instances for leaf label(s) " + missing);
  }
  return set;
}

std::vector<BankStats> bank_stats(const MemoryBankSet& set, const Tree& tree) {
  std::vector<BankStats> out;
  for (const auto& [leaf, bank] : set.banks) {
    BankStats s;
    s.leaf_id = leaf;
    s.label = tree.node(leaf).label;
    s.k = bank.prototypes.size();
    if (s.k >= 2) {
      double sum = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < s.k; ++i) {
        for (std::size_t j = i + 1; j < s.k; ++j) {
          sum += kernels::cosine(bank.prototypes[i].feature, bank.prototypes[j].feature);
          ++n;
        }
      }
      s.mean_pairwise_cosine = sum / static_cast<double>(n);
    }
    out.push_back(std::move(s));
  }
  return out;
}

double utilization_entropy(const LeafMemoryBank& bank) {
  std::uint64_t total = 0;
  for (std::uint64_t c : bank.usage_counts) total += c;
  if (total == 0) throw data_error("utilization_entropy: no usage recorded for leaf " +
                                   std::to_string(bank.leaf_id));
  double h = 0.0;
  for (std::uint64_t c : bank.usage_counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace emem
