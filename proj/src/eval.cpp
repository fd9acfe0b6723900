#include "emem/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "emem/error.hpp"
#include "emem/memory.hpp"

namespace emem {

using nlohmann::json;

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (std::uint64_t c : counts) n += c;
  return n;
}

std::string ConfusionMatrix::to_csv() const {
  std::ostringstream out;
  out << "truth\\predicted";
  for (const std::string& l : labels) out << ',' << l;
  out << '\n';
  for (std::size_t i = 0; i < m(); ++i) {
    out << labels[i];
    for (std::size_t j = 0; j < m(); ++j) out << ',' << cell(i, j);
    out << '\n';
  }
  return out.str();
}

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm) {
  const std::size_t m = cm.m();
  MetricsReport rep;
  std::uint64_t correct = 0;
  double macro_p = 0.0, macro_r = 0.0, macro_f = 0.0;
  std::size_t macro_n = 0;
  for (std::size_t c = 0; c < m; ++c) {
    ClassMetrics cl;
    cl.label = cm.labels[c];
    std::uint64_t tp = cm.cell(c, c), row = 0, col = 0;
    for (std::size_t j = 0; j < m; ++j) {
      row += cm.cell(c, j);
      col += cm.cell(j, c);
    }
    cl.support = row;
    cl.precision = col > 0 ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    cl.recall = row > 0 ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    cl.f1 = (cl.precision + cl.recall) > 0.0
                ? 2.0 * cl.precision * cl.recall / (cl.precision + cl.recall)
                : 0.0;
    correct += tp;
    if (row > 0) {
      macro_p += cl.precision;
      macro_r += cl.recall;
      macro_f += cl.f1;
      ++macro_n;
    } else {
      rep.zero_support_labels.push_back(cl.label);
    }
    rep.per_class.push_back(std::move(cl));
  }
  if (macro_n > 0) {
    rep.macro_precision = macro_p / static_cast<double>(macro_n);
    rep.macro_recall = macro_r / static_cast<double>(macro_n);
    rep.macro_f1 = macro_f / static_cast<double>(macro_n);
  }
  const std::uint64_t total = cm.total();
  const double acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  rep.micro_precision = rep.micro_recall = rep.micro_f1 = acc;
  return rep;
}

namespace {

ConfusionMatrix make_confusion(const BehaviorTaxonomy& tax) {
  ConfusionMatrix cm;
  for (const auto& [label, desc] : tax.labels) cm.labels.push_back(label);
  cm.counts.assign(cm.m() * cm.m(), 0);
  return cm;
}

std::size_t class_index(const BehaviorTaxonomy& tax, const std::string& label,
                        const std::string& what) {
  const auto idx = tax.index_of(label);
  if (!idx) throw data_error("evaluate: " + what + " label '" + label + "' outside the taxonomy");
  return *idx;
}

}  // namespace

std::pair<ConfusionMatrix, MetricsReport> evaluate(EMemNdtModel& model,
                                                   const EncoderParams& encoder,
                                                   const Dataset& test, const EdgePolicy& policy,
                                                   int threads, bool track_usage) {
  if (test.instances.empty()) throw data_error("evaluate: empty test set");
  validate_dataset(test);
  const std::vector<ForwardResult> encoded =
      encode_instances(test.instances, encoder, policy, threads);

  ConfusionMatrix cm = make_confusion(test.taxonomy);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const PredictResult pr = predict(encoded[i].embedding.g, model);
    const std::size_t truth = class_index(test.taxonomy, test.instances[i].label, "ground-truth");
    const std::size_t pred = class_index(test.taxonomy, pr.label, "predicted");
    cm.cell(truth, pred) += 1;
    if (track_usage) record_usage(model, pr.leaf_id, pr.best_prototype);
  }
  return {cm, metrics_from_confusion(cm)};
}

std::pair<ConfusionMatrix, MetricsReport> evaluate_base(const EncoderParams& encoder,
                                                        const Dataset& test,
                                                        const EdgePolicy& policy, int threads) {
  if (test.instances.empty()) throw data_error("evaluate: empty test set");
  validate_dataset(test);
  if (static_cast<int>(test.taxonomy.size()) != encoder.config.n_classes) {
    throw data_error("evaluate_base: taxonomy size differs from encoder n_classes");
  }
  const std::vector<ForwardResult> encoded =
      encode_instances(test.instances, encoder, policy, threads);
  ConfusionMatrix cm = make_confusion(test.taxonomy);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& probs = encoded[i].probs;
    std::size_t pred = 0;
    for (std::size_t c = 1; c < probs.size(); ++c) {
      if (probs[c] > probs[pred]) pred = c;
    }
    const std::size_t truth = class_index(test.taxonomy, test.instances[i].label, "ground-truth");
    cm.cell(truth, pred) += 1;
  }
  return {cm, metrics_from_confusion(cm)};
}

MetricsReport few_shot_report(const MetricsReport& report,
                              const std::vector<std::string>& few_shot_labels) {
  MetricsReport out;
  double p = 0.0, r = 0.0, f = 0.0;
  std::size_t n = 0;
  for (const std::string& label : few_shot_labels) {
    auto it = std::find_if(report.per_class.begin(), report.per_class.end(),
                           [&](const ClassMetrics& c) { return c.label == label; });
    if (it == report.per_class.end()) {
      throw data_error("few_shot_report: unknown label '" + label + "'");
    }
    out.per_class.push_back(*it);
    if (it->support > 0) {
      p += it->precision;
      r += it->recall;
      f += it->f1;
      ++n;
    } else {
      out.zero_support_labels.push_back(label);
    }
  }
  if (n > 0) {
    out.macro_precision = p / static_cast<double>(n);
    out.macro_recall = r / static_cast<double>(n);
    out.macro_f1 = f / static_cast<double>(n);
  }
  out.micro_precision = out.micro_recall = out.micro_f1 = 0.0;  // not defined for a subset view
  return out;
}

std::vector<EtaSweepRow> sweep_eta(const Dataset& train, const Dataset& test,
                                   const EncoderParams& encoder, const Tree& tree,
                                   const std::vector<double>& etas,
                                   const NdtBuildConfig& build, const NdtTrainConfig& train_cfg,
                                   const EdgePolicy& policy) {
  for (double eta : etas) {
    if (eta < -1.0 || eta > 1.0) throw usage_error("sweep_eta: eta must be in [-1, 1]");
  }
  std::vector<EtaSweepRow> rows;
  for (double eta : etas) {
    MemoryBankSet banks = implant(train, encoder, tree, eta, policy);
    EMemNdtModel model =
        init_model(tree, std::move(banks), encoder.config.d_model, build.hidden, build.out,
                   build.rho, build.aggregation, build.shared_h, build.seed, "");
    train_ndt(model, train, encoder, train_cfg, policy);
    auto [cm, rep] = evaluate(model, encoder, test, policy, 1, /*track_usage=*/false);
    EtaSweepRow row;
    row.eta = eta;
    row.macro_precision = rep.macro_precision;
    row.macro_recall = rep.macro_recall;
    row.macro_f1 = rep.macro_f1;
    row.emb_total = model.banks.total_size();
    rows.push_back(row);
    std::cerr << "[sweep-eta] eta=" << eta << " macro_f1=" << rep.macro_f1
              << " emb=" << row.emb_total << "\n";
  }
  return rows;
}

std::vector<LeafUtilization> utilization_report(const EMemNdtModel& model) {
  std::uint64_t grand_total = 0;
  for (const auto& [leaf, bank] : model.banks.banks) {
    for (std::uint64_t c : bank.usage_counts) grand_total += c;
  }
  if (grand_total == 0) {
    throw data_error("utilization_report: no usage recorded; run predictions first");
  }
  std::vector<LeafUtilization> out;
  for (const auto& [leaf, bank] : model.banks.banks) {
    LeafUtilization u;
    u.leaf_id = leaf;
    u.label = model.tree.node(leaf).label;
    u.k = bank.prototypes.size();
    std::uint64_t total = 0, zeros = 0;
    for (std::uint64_t c : bank.usage_counts) {
      total += c;
      if (c == 0) ++zeros;
    }
    u.entropy = total > 0 ? utilization_entropy(bank) : 0.0;
    u.zero_usage_fraction = static_cast<double>(zeros) / static_cast<double>(u.k);
    std::vector<std::size_t> idx(u.k);
    for (std::size_t i = 0; i < u.k; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (bank.usage_counts[a] != bank.usage_counts[b]) {
        return bank.usage_counts[a] > bank.usage_counts[b];
      }
      return a < b;
    });
    for (std::size_t i = 0; i < std::min<std::size_t>(3, u.k); ++i) {
      u.top_used.emplace_back(idx[i], bank.usage_counts[idx[i]]);
    }
    out.push_back(std::move(u));
  }
  return out;
}

json report_to_json(const ConfusionMatrix& cm, const MetricsReport& report) {
  json per_class = json::array();
  for (const ClassMetrics& c : report.per_class) {
    per_class.push_back(json{{"label", c.label},
                             {"precision", c.precision},
                             {"recall", c.recall},
                             {"f1", c.f1},
                             {"support", c.support}});
  }
  json rows = json::array();
  for (std::size_t i = 0; i < cm.m(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < cm.m(); ++j) row.push_back(cm.cell(i, j));
    rows.push_back(std::move(row));
  }
  return json{{"per_class", std::move(per_class)},
              {"macro", {{"precision", report.macro_precision},
                         {"recall", report.macro_recall},
                         {"f1", report.macro_f1}}},
              {"micro", {{"precision", report.micro_precision},
                         {"recall", report.micro_recall},
                         {"f1", report.micro_f1}}},
              {"zero_support_labels", report.zero_support_labels},
              {"confusion", {{"labels", cm.labels}, {"counts", std::move(rows)}}}};
}

std::string report_to_text(const MetricsReport& report) {
  std::ostringstream out;
  std::size_t width = 12;
  for (const ClassMetrics& c : report.per_class) width = std::max(width, c.label.size() + 2);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-*s %9s %9s %9s %9s\n", static_cast<int>(width), "class",
                "precision", "recall", "f1", "support");
  out << buf;
  for (const ClassMetrics& c : report.per_class) {
    std::snprintf(buf, sizeof(buf), "%-*s %9.4f %9.4f %9.4f %9llu\n", static_cast<int>(width),
                  c.label.c_str(), c.precision, c.recall, c.f1,
                  static_cast<unsigned long long>(c.support));
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-*s %9.4f %9.4f %9.4f\n", static_cast<int>(width), "macro",
                report.macro_precision, report.macro_recall, report.macro_f1);
  out << buf;
  std::snprintf(buf, sizeof(buf), "%-*s %9.4f %9.4f %9.4f\n", static_cast<int>(width), "micro",
                report.micro_precision, report.micro_recall, report.micro_f1);
  out << buf;
  if (!report.zero_support_labels.empty()) {
    out << "excluded from macro (zero support):";
    for (const std::string& l : report.zero_support_labels) out << ' ' << l;
    out << '\n';
  }
  return out.str();
}

}  // namespace emem
